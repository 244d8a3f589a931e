"""Pareto ranking: fast non-dominated sorting, crowding distance, selection.

Objective vectors are rows of an (n, m) array; ``maximize`` flags the axes to
be maximized (accuracy), the rest are minimized (latency, energy).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DIRECTIONS = (True, False, False)  # (accuracy, latency ms, energy mJ)


@dataclass(frozen=True)
class ObjectivePoint:
    values: tuple[float, ...]
    payload_id: int
    maximize: tuple[bool, ...] = DIRECTIONS


@dataclass(frozen=True)
class ScoredCandidate:
    point: ObjectivePoint
    rank: int
    crowding: float


def _as_minimization(values, maximize: Sequence[bool]) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"objective array must be 2-d, got shape {v.shape}")
    if v.shape[1] != len(maximize):
        raise ValueError(f"{v.shape[1]} objectives but {len(maximize)} directions")
    if np.isnan(v).any():
        raise ValueError("NaN objective value")
    sign = np.where(np.asarray(maximize, dtype=bool), -1.0, 1.0)
    return v * sign


def dominance_matrix(values, maximize: Sequence[bool] = DIRECTIONS) -> np.ndarray:
    """``D[i, j]`` is True when point i dominates point j."""
    v = _as_minimization(values, maximize)
    le = (v[:, None, :] <= v[None, :, :]).all(axis=2)
    lt = (v[:, None, :] < v[None, :, :]).any(axis=2)
    return le & lt


def non_dominated_sort(values, maximize: Sequence[bool] = DIRECTIONS) -> list[list[int]]:
    """Deb's fast non-dominated sort. Returns fronts as lists of row indices."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape[0] == 0:
        return []
    dom = dominance_matrix(v, maximize)
    counts = dom.sum(axis=0)  # how many points dominate each point
    dominated_by = [np.flatnonzero(dom[i]) for i in range(len(v))]
    fronts: list[list[int]] = []
    current = [i for i in range(len(v)) if counts[i] == 0]
    while current:
        fronts.append(current)
        nxt = []
        for i in current:
            for j in dominated_by[i]:
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(int(j))
        current = sorted(nxt)
    return fronts


def crowding_distance(values) -> np.ndarray:
    """Crowding distance of each point within one front.

    Boundary points on any objective get ``inf``; an objective with zero
    range across the front adds nothing to interior points.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] == 0:
        raise ValueError("crowding_distance needs a nonempty (n, m) front")
    n, m = v.shape
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = np.inf
        return dist
    for k in range(m):
        order = np.argsort(v[:, k], kind="stable")
        col = v[order, k]
        dist[order[0]] = np.inf
        dist[order[-1]] = np.inf
        span = col[-1] - col[0]
        if span == 0:
            continue
        dist[order[1:-1]] += (col[2:] - col[:-2]) / span
    return dist


def rank_and_crowding(values, maximize: Sequence[bool] = DIRECTIONS) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(values, dtype=np.float64)
    ranks = np.zeros(len(v), dtype=np.int64)
    crowd = np.zeros(len(v))
    for r, front in enumerate(non_dominated_sort(v, maximize)):
        ranks[front] = r
        crowd[front] = crowding_distance(v[front])
    return ranks, crowd


def eval_order(values, maximize: Sequence[bool] = DIRECTIONS, ids: Sequence[int] | None = None) -> list[int]:
    """Indices sorted best-first: lower rank, then larger crowding, then smaller id."""
    v = np.asarray(values, dtype=np.float64)
    if ids is None:
        ids = list(range(len(v)))
    ranks, crowd = rank_and_crowding(v, maximize)
    return sorted(range(len(v)), key=lambda i: (ranks[i], -crowd[i], ids[i]))


def score(points: Sequence[ObjectivePoint]) -> list[ScoredCandidate]:
    """Annotate points with rank and crowding, returned in eval-score order."""
    if not points:
        return []
    maximize = points[0].maximize
    if any(p.maximize != maximize for p in points):
        raise ValueError("all candidates must share objective directions")
    vals = np.array([p.values for p in points], dtype=np.float64)
    ranks, crowd = rank_and_crowding(vals, maximize)
    order = eval_order(vals, maximize, [p.payload_id for p in points])
    return [ScoredCandidate(points[i], int(ranks[i]), float(crowd[i])) for i in order]


def select_fraction(ordered: Sequence, fraction: float) -> list:
    """The best ``ceil(fraction * n)`` entries of an already ordered sequence."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside (0, 1]")
    if len(ordered) == 0:
        raise ValueError("cannot select from an empty population")
    k = math.ceil(fraction * len(ordered))
    return list(ordered[:k])


def hypervolume(values, reference, maximize: Sequence[bool] = DIRECTIONS) -> float:
    """Exact dominated volume bounded by ``reference`` (slicing; fine for small fronts)."""
    v = _as_minimization(values, maximize)
    ref = np.asarray(reference, dtype=np.float64) * np.where(np.asarray(maximize, dtype=bool), -1.0, 1.0)
    v = v[(v < ref).all(axis=1)]
    return _hv_min(v, ref)


def _hv_min(v: np.ndarray, ref: np.ndarray) -> float:
    if len(v) == 0:
        return 0.0
    if v.shape[1] == 1:
        return float(ref[0] - v[:, 0].min())
    order = np.argsort(v[:, -1], kind="stable")
    v = v[order]
    total = 0.0
    for i in range(len(v)):
        upper = v[i + 1, -1] if i + 1 < len(v) else ref[-1]
        height = upper - v[i, -1]
        if height > 0:
            total += height * _hv_min(v[: i + 1, :-1], ref[:-1])
    return total
