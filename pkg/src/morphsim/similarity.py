"""Layer-averaged cosine similarity and transitive estimates from gossiped reports."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .model import ModelParams

HISTORY_CAPACITY = 5
NORM_EPS = 1e-12


class DegenerateLayer(ValueError):
    """A layer norm is too small for cosine similarity to be meaningful."""


def _clamp(x: float) -> float:
    return max(-1.0, min(1.0, x))


def cosine_similarity(a: ModelParams, b: ModelParams) -> float:
    """Mean over layers of the cosine between matching layer vectors."""
    a.check_shape(b)
    total = 0.0
    for (name, va), (_, vb) in zip(a.layers, b.layers):
        x, y = va.ravel(), vb.ravel()
        na, nb = float(np.sqrt(x @ x)), float(np.sqrt(y @ y))
        if na < NORM_EPS or nb < NORM_EPS:
            raise DegenerateLayer(f"layer {name!r} has near-zero norm")
        # product of the two norms commutes, so the result is exactly symmetric
        total += float(x @ y) / (na * nb)
    return _clamp(total / len(a.layers))


@dataclass(frozen=True)
class SimilarityReport:
    round: int
    reporter: int
    value: float

    def __post_init__(self):
        if not -1.0 <= self.value <= 1.0 or math.isnan(self.value):
            raise ValueError(f"similarity {self.value} outside [-1, 1]")
        if self.round < 0:
            raise ValueError("round must be >= 0")


@dataclass
class SimilarityHistory:
    """Per-target FIFO of the most recent reports (capacity 5)."""

    capacity: int = HISTORY_CAPACITY
    buffers: dict[int, deque] = field(default_factory=dict)

    def reports(self, target: int) -> tuple[SimilarityReport, ...]:
        return tuple(self.buffers.get(target, ()))

    def targets(self):
        return self.buffers.keys()


def record_report(history: SimilarityHistory, target: int, report: SimilarityReport) -> SimilarityHistory:
    """Append ``report`` to ``target``'s buffer, evicting the oldest beyond capacity.

    Mutates and returns ``history``.
    """
    if not isinstance(report, SimilarityReport):
        raise TypeError("report must be a SimilarityReport")
    buf = history.buffers.get(target)
    if buf is None:
        buf = history.buffers[target] = deque(maxlen=history.capacity)
    buf.append(report)
    return history


def estimate_similarity(
    own: ModelParams,
    known_models: Mapping[int, ModelParams],
    history: SimilarityHistory,
    target: int,
    current_round: int | None = None,
    max_age: int | None = None,
) -> float | None:
    """Transitive estimate of sim(own, target) through reporters whose models we hold.

    Averages cos(own, model_y) * sigma_yz over usable reports. A report is
    unusable if its reporter's model is unknown or degenerate, or if it is
    older than ``max_age`` rounds (when both ``current_round`` and
    ``max_age`` are given). Returns None when nothing is usable.
    """
    terms = []
    for rep in history.reports(target):
        if max_age is not None and current_round is not None and current_round - rep.round > max_age:
            continue
        model_y = known_models.get(rep.reporter)
        if model_y is None:
            continue
        try:
            sim_iy = cosine_similarity(own, model_y)
        except DegenerateLayer:
            continue
        terms.append(sim_iy * rep.value)
    if not terms:
        return None
    return _clamp(sum(terms) / len(terms))


def angular_triangle_slack(sim_ij: float, sim_jk: float, sim_ik: float) -> float:
    """arccos(sim_ij) + arccos(sim_jk) - arccos(sim_ik); non-negative for true cosines."""
    for s in (sim_ij, sim_jk, sim_ik):
        if not -1.0 <= s <= 1.0:
            raise ValueError(f"cosine {s} outside [-1, 1]")
    return math.acos(sim_ij) + math.acos(sim_jk) - math.acos(sim_ik)
