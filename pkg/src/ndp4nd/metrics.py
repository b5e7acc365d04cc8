"""Evaluation metrics: MAE, dynamic time warping, and observed ratio."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ParameterError

# Below this length fastdtw's coarsening buys nothing; score exactly.
EXACT_DTW_MAX_LEN = 64


def mae(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean absolute error over every entry of two same-shaped arrays."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ParameterError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean(np.abs(pred - truth)))


def dtw_exact(a: Sequence[float], b: Sequence[float]) -> float:
    """Full O(|a|*|b|) dynamic-time-warping distance with |x - y| local cost."""
    return _dtw_full(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))[0]


def _dtw_full(a: np.ndarray, b: np.ndarray) -> tuple[float, list[tuple[int, int]]]:
    if a.ndim != 1 or b.ndim != 1 or a.size == 0 or b.size == 0:
        raise ParameterError("dtw requires nonempty 1-d series")
    window = [(i, j) for i in range(a.size) for j in range(b.size)]
    return _dtw_windowed(a, b, window)


def _dtw_windowed(a: np.ndarray, b: np.ndarray,
                  window: list[tuple[int, int]]) -> tuple[float, list[tuple[int, int]]]:
    # Cells run over the given (i, j) window; the DP uses 1-based indices so
    # border handling stays uniform.
    cost: dict[tuple[int, int], tuple[float, tuple[int, int]]] = {(0, 0): (0.0, (0, 0))}
    for i, j in window:
        ii, jj = i + 1, j + 1
        local = abs(a[i] - b[j])
        best = None
        for prev in ((ii - 1, jj), (ii, jj - 1), (ii - 1, jj - 1)):
            entry = cost.get(prev)
            if entry is not None and (best is None or entry[0] < best[0]):
                best = (entry[0], prev)
        if best is None:
            continue
        cost[(ii, jj)] = (best[0] + local, best[1])
    end = (a.size, b.size)
    if end not in cost:
        raise ParameterError("dtw window does not connect the series ends")
    path = []
    node = end
    while node != (0, 0):
        path.append((node[0] - 1, node[1] - 1))
        node = cost[node][1]
    path.reverse()
    return cost[end][0], path


def fastdtw(a: Sequence[float], b: Sequence[float], radius: int = 1) -> float:
    """Recursive coarsen-project-refine approximation of dtw_exact.

    With radius at least the series length the projected window covers the
    full cost matrix, so the result equals the exact distance.
    """
    if radius < 0:
        raise ParameterError("radius must be >= 0")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return _fastdtw(a, b, radius)[0]


def _fastdtw(a: np.ndarray, b: np.ndarray, radius: int) -> tuple[float, list[tuple[int, int]]]:
    min_size = radius + 2
    if a.size <= min_size or b.size <= min_size:
        return _dtw_full(a, b)
    coarse_a = _halve(a)
    coarse_b = _halve(b)
    _, coarse_path = _fastdtw(coarse_a, coarse_b, radius)
    window = _expanded_window(coarse_path, a.size, b.size, radius)
    return _dtw_windowed(a, b, window)


def _halve(series: np.ndarray) -> np.ndarray:
    even = series[: series.size - series.size % 2]
    coarse = even.reshape(-1, 2).mean(axis=1)
    if series.size % 2 == 1:
        coarse = np.append(coarse, series[-1])
    return coarse


def _expanded_window(coarse_path: list[tuple[int, int]], len_a: int, len_b: int,
                     radius: int) -> list[tuple[int, int]]:
    projected: set[tuple[int, int]] = set()
    for i, j in coarse_path:
        for di in range(-radius, radius + 1):
            for dj in range(-radius, radius + 1):
                projected.update(
                    ((i + di) * 2 + a, (j + dj) * 2 + b)
                    for a in (0, 1) for b in (0, 1)
                )
    window = []
    start_j = 0
    for i in range(len_a):
        new_start = None
        for j in range(start_j, len_b):
            if (i, j) in projected:
                window.append((i, j))
                if new_start is None:
                    new_start = j
            elif new_start is not None:
                break
        if new_start is not None:
            start_j = new_start
    return window


def series_dtw(a: Sequence[float], b: Sequence[float], radius: int = 1) -> float:
    """DTW distance for scoring: exact below EXACT_DTW_MAX_LEN, fastdtw above."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < EXACT_DTW_MAX_LEN and b.size < EXACT_DTW_MAX_LEN:
        return dtw_exact(a, b)
    return fastdtw(a, b, radius)


def trajectory_dtw(pred: np.ndarray, truth: np.ndarray, radius: int = 1) -> float:
    """Per-(node, dimension) series DTW, averaged: (1/(n*d)) * sum dtw."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 3:
        raise ParameterError(f"expected matching (T, n, d) arrays, got {pred.shape} vs {truth.shape}")
    _, n, d = pred.shape
    total = 0.0
    for l in range(n):
        for dim in range(d):
            total += series_dtw(pred[:, l, dim], truth[:, l, dim], radius)
    return total / (n * d)


def observed_ratio(n_obs: int, delta_t: float, t_start: float, t_end: float,
                   n_nodes: int) -> float:
    """Percentage of the (time grid x nodes) lattice covered by n_obs samples."""
    if t_end < t_start:
        raise ParameterError("t_end must be >= t_start")
    if delta_t <= 0 or n_nodes < 1 or n_obs < 0:
        raise ParameterError("need delta_t > 0, n_nodes >= 1, n_obs >= 0")
    span = t_end - t_start
    slots = round(span / delta_t)
    if abs(slots * delta_t - span) > 1e-9 * max(1.0, span):
        raise ParameterError(f"delta_t={delta_t} does not divide the span {span}")
    return n_obs / ((slots + 1) * n_nodes) * 100.0


@dataclass
class TaskScore:
    """Per-task metrics, split at the interpolation/extrapolation boundary T_o."""

    task_id: int
    mae_interp: float
    mae_extrap: float
    dtw_interp: float
    dtw_extrap: float
    observed_ratio: float


@dataclass
class EvalReport:
    """Aggregate of TaskScore rows; aggregates are mean (standard deviation)."""

    scores: list[TaskScore] = field(default_factory=list)
    runtime_seconds: float = 0.0

    METRICS = ("mae_interp", "mae_extrap", "dtw_interp", "dtw_extrap", "observed_ratio")

    def aggregate(self) -> dict:
        out: dict = {"num_tasks": len(self.scores)}
        for name in self.METRICS:
            vals = np.array([getattr(s, name) for s in self.scores], dtype=np.float64)
            out[name] = {
                "mean": float(np.mean(vals)) if vals.size else float("nan"),
                "std": float(np.std(vals)) if vals.size else float("nan"),
                "median": float(np.median(vals)) if vals.size else float("nan"),
            }
        return out

    def to_csv(self) -> str:
        lines = ["task_id," + ",".join(self.METRICS)]
        for s in self.scores:
            vals = ",".join(repr(getattr(s, name)) for name in self.METRICS)
            lines.append(f"{s.task_id},{vals}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.aggregate(), indent=2, sort_keys=True) + "\n"
