"""Wanted-sender selection: dissimilarity-biased softmax draws plus a uniform random slice."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Collection, Iterable, Literal, Mapping

import numpy as np

Source = Literal["direct", "estimated"]


class EmptyCandidates(ValueError):
    pass


class InsufficientPeers(ValueError):
    pass


@dataclass(frozen=True)
class CandidateScore:
    peer: int
    similarity: float
    source: Source = "direct"


@dataclass(frozen=True)
class CandidateScores:
    entries: tuple[CandidateScore, ...]

    def __post_init__(self):
        peers = [e.peer for e in self.entries]
        if len(set(peers)) != len(peers):
            raise ValueError("candidate peers must be unique")

    @classmethod
    def from_mapping(cls, sims: Mapping[int, float], source: Source = "direct") -> "CandidateScores":
        return cls(tuple(CandidateScore(p, float(s), source) for p, s in sorted(sims.items())))

    @property
    def peers(self) -> tuple[int, ...]:
        return tuple(e.peer for e in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def without(self, node: int) -> "CandidateScores":
        return CandidateScores(tuple(e for e in self.entries if e.peer != node))


@dataclass(frozen=True)
class SelectionParams:
    view_size: int
    biased_count: int
    beta: float

    def __post_init__(self):
        if self.view_size < 1:
            raise ValueError("view_size must be >= 1")
        if not 0 <= self.biased_count <= self.view_size:
            raise ValueError("biased_count must be in [0, view_size]")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


def _softmax_neg(sims: np.ndarray, beta: float) -> np.ndarray:
    z = -beta * sims
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()


def softmax_weights(scores: CandidateScores, excluded: Collection[int], beta: float) -> dict[int, float]:
    """p_j proportional to exp(-beta * sim_j) over candidates not in ``excluded``."""
    remaining = [e for e in scores.entries if e.peer not in excluded]
    if not remaining:
        raise EmptyCandidates("no candidates left to weight")
    p = _softmax_neg(np.array([e.similarity for e in remaining]), beta)
    return {e.peer: float(pj) for e, pj in zip(remaining, p)}


def sample_biased(scores: CandidateScores, k: int, beta: float, rng: np.random.Generator) -> list[int]:
    """Draw up to ``k`` distinct peers one at a time, renormalising after each draw.

    When fewer than ``k`` candidates exist, all of them are returned in draw order.
    """
    peers = list(scores.peers)
    sims = np.array([e.similarity for e in scores.entries], dtype=np.float64)
    alive = np.ones(len(peers), dtype=bool)
    chosen: list[int] = []
    for _ in range(min(k, len(peers))):
        idx = np.flatnonzero(alive)
        p = _softmax_neg(sims[idx], beta)
        pick = idx[min(int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right")), len(idx) - 1)]
        alive[pick] = False
        chosen.append(peers[pick])
    return chosen


def _uniform_sample(pool: Iterable[int], count: int, rng: np.random.Generator) -> list[int]:
    pool = sorted(pool)
    if count <= 0 or not pool:
        return []
    picks = rng.choice(len(pool), size=min(count, len(pool)), replace=False)
    return [pool[i] for i in picks]


def update_wanted_senders(
    own_model,
    scores: CandidateScores,
    all_known: Collection[int],
    params: SelectionParams,
    rng: np.random.Generator,
    self_id: int | None = None,
) -> list[int]:
    """Build a view of exactly ``view_size`` peers: biased picks C_b then random picks R.

    R is drawn uniformly from known peers without a score first; if that pool is
    too small the remainder comes from the rest of the known peers not in C_b.
    Returned in selection order (C_b first). ``own_model`` is accepted for
    signature parity; similarities arrive precomputed in ``scores``.
    """
    known = set(all_known)
    if self_id is not None:
        known.discard(self_id)
        scores = scores.without(self_id)
    s = params.view_size
    if len(known) < s:
        raise InsufficientPeers(f"need {s} known peers, have {len(known)}")
    scores = CandidateScores(tuple(e for e in scores.entries if e.peer in known))

    biased = sample_biased(scores, params.biased_count, params.beta, rng)
    need = s - len(biased)
    unscored = known - set(scores.peers)
    randoms = _uniform_sample(unscored, need, rng)
    if len(randoms) < need:
        rest = known - set(biased) - set(randoms)
        randoms += _uniform_sample(rest, need - len(randoms), rng)
    view = biased + randoms
    assert len(view) == s and len(set(view)) == s
    return view
