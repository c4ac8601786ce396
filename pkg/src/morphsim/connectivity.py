"""Monte-Carlo estimate of how often a hybrid biased+random topology is connected.

Each node gets a fingerprint vector drawn around one of ``clusters`` Gaussian
centres. Per trial every node picks ``d_s`` peers by dissimilarity-weighted
softmax sampling without replacement and ``d_r`` further peers uniformly; the
trial succeeds if the union graph is connected ignoring edge directions.

Sequential softmax draws are realised with Gumbel top-k (perturb the logits
with Gumbel noise, keep the k largest), which yields the same ordered-sample
distribution as renormalising after every draw and vectorises over nodes.
Trials reuse the same random draws for every grid point (common random
numbers), so a point's estimate is identical whether computed alone or as
part of a sweep.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

CSV_COLUMNS = ("n", "d_s", "d_r", "probability", "std_error", "trials")


@dataclass(frozen=True)
class ConnectivityGrid:
    n: int
    d_s: tuple[int, ...]
    d_r: tuple[int, ...]
    trials: int = 1000
    clusters: int = 10
    seed: int = 0
    beta: float = 5.0
    dim: int = 8
    spread: float = 0.3

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.n < 1 or self.clusters < 1 or self.dim < 1:
            raise ValueError("n, clusters and dim must be >= 1")
        if not self.d_s or not self.d_r:
            raise ValueError("grid ranges must be non-empty")
        for ds in self.d_s:
            for dr in self.d_r:
                _check_point(self.n, ds, dr)


@dataclass(frozen=True)
class GridRow:
    n: int
    d_s: int
    d_r: int
    probability: float
    std_error: float
    trials: int


def _check_point(n: int, d_s: int, d_r: int) -> None:
    if d_s < 0 or d_r < 0:
        raise ValueError("d_s and d_r must be >= 0")
    if d_s + d_r > n - 1:
        raise ValueError(f"d_s + d_r = {d_s + d_r} exceeds n - 1 = {n - 1}")


def _fingerprints(n: int, clusters: int, dim: int, spread: float, rng: np.random.Generator) -> np.ndarray:
    centers = rng.standard_normal((clusters, dim))
    fp = centers[rng.integers(clusters, size=n)] + spread * rng.standard_normal((n, dim))
    return fp / np.linalg.norm(fp, axis=1, keepdims=True)


def _top_order(keys: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k largest keys per row, largest first."""
    if k == 0:
        return np.empty((keys.shape[0], 0), dtype=np.int64)
    part = np.argpartition(-keys, k - 1, axis=1)[:, :k]
    vals = np.take_along_axis(keys, part, axis=1)
    return np.take_along_axis(part, np.argsort(-vals, axis=1, kind="stable"), axis=1)


def gumbel_top_k(logits: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Ordered k-sample without replacement from softmax(logits), one row per sampler."""
    return _top_order(logits + rng.gumbel(size=logits.shape), k)


class _Trial:
    """All random draws of one trial, sized for the largest grid point."""

    def __init__(self, n: int, max_ds: int, max_dr: int, clusters: int, beta: float,
                 dim: int, spread: float, rng: np.random.Generator):
        fp = _fingerprints(n, clusters, dim, spread, rng)
        logits = -beta * (fp @ fp.T)
        np.fill_diagonal(logits, -np.inf)
        self.biased = gumbel_top_k(logits, max_ds, rng)
        keys = rng.random((n, n))
        np.fill_diagonal(keys, -np.inf)
        self.random = _top_order(keys, min(max_ds + max_dr, n - 1))
        self.n = n

    def connected(self, d_s: int, d_r: int) -> bool:
        n = self.n
        if n == 1:
            return True
        biased = self.biased[:, :d_s]
        cand = self.random
        if d_s:
            clash = (cand[:, :, None] == biased[:, None, :]).any(axis=2)
        else:
            clash = np.zeros(cand.shape, dtype=bool)
        keep = ~clash
        keep &= np.cumsum(keep, axis=1) <= d_r
        rows = np.concatenate([np.repeat(np.arange(n), d_s), np.nonzero(keep)[0]])
        cols = np.concatenate([biased.ravel(), cand[keep]])
        if rows.size == 0:
            return False
        graph = csr_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(n, n))
        ncomp, _ = connected_components(graph, directed=True, connection="weak")
        return ncomp == 1


def _trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, trial]))


def sweep_grid(grid: ConnectivityGrid) -> list[GridRow]:
    """Estimate connectivity probability on the full d_s x d_r cross-product."""
    points = [(ds, dr) for ds in grid.d_s for dr in grid.d_r]
    max_ds, max_dr = max(grid.d_s), max(grid.d_r)
    hits = dict.fromkeys(points, 0)
    for t in range(grid.trials):
        trial = _Trial(grid.n, max_ds, max_dr, grid.clusters, grid.beta, grid.dim, grid.spread,
                       _trial_rng(grid.seed, t))
        for ds, dr in points:
            hits[(ds, dr)] += trial.connected(ds, dr)
    rows = []
    for ds, dr in points:
        p = hits[(ds, dr)] / grid.trials
        rows.append(GridRow(grid.n, ds, dr, p, math.sqrt(p * (1 - p) / grid.trials), grid.trials))
    return rows


def connectivity_probability(
    n: int,
    d_s: int,
    d_r: int,
    clusters: int = 10,
    beta: float = 5.0,
    trials: int = 1000,
    seed: int = 0,
    dim: int = 8,
    spread: float = 0.3,
) -> float:
    _check_point(n, d_s, d_r)
    grid = ConnectivityGrid(n, (d_s,), (d_r,), trials, clusters, seed, beta, dim, spread)
    return sweep_grid(grid)[0].probability


def write_grid_csv(path: str | Path, rows: Sequence[GridRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r.n, r.d_s, r.d_r, f"{r.probability:.9g}", f"{r.std_error:.9g}", r.trials])
