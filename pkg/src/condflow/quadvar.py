"""Increment tables, variation estimators, and weighted quadratic-variation sums.

The central statistic is sum_i H_{t_{i-1}} : (dX_i)(dXhat_i)^T for a
weight process H held constant on each grid cell.  For a path with a
known bracket the statistic converges (in L1, as the mesh shrinks) to
the bracket integral; ``lemma_convergence_study`` measures that error
empirically over independent paths.
"""

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .paths import Partition, RngStream, SamplePath

__all__ = [
    "IncrementTable",
    "WeightProcess",
    "increments",
    "total_variation",
    "realized_qv",
    "weighted_qv_sum",
    "constant_weight",
    "sampled_weight",
    "LemmaStudyRow",
    "LemmaStudy",
    "lemma_convergence_study",
]


@dataclass(frozen=True)
class IncrementTable:
    """Per-cell increments of a path along a partition, cut at time s.

    ``times`` are the realized cell edges 0 = e_0 < ... < e_k = s; the
    last cell may be a partial one when s falls inside a grid cell.
    """

    partition: Partition
    s: float
    times: np.ndarray
    values: np.ndarray

    def total(self) -> np.ndarray | float:
        return self.values.sum(axis=0) if self.values.size else 0.0


def increments(path: SamplePath, partition: Partition, s: float) -> IncrementTable:
    """Increment table of ``path`` along ``partition``, restricted to [0, s]."""
    t = partition.times
    if s < 0.0 or s > t[-1]:
        raise InvalidArgumentError(f"time {s} outside [0, {t[-1]}]")
    partition.indices_in(path.partition)  # subordination check
    edges = t[t < s]
    edges = np.concatenate([edges, [s]])
    if edges.size < 2:
        edges = np.array([0.0, s]) if s > 0 else np.array([0.0])
    vals = np.array([path.value_at(e) for e in edges])
    return IncrementTable(partition, float(s), edges, np.diff(vals, axis=0))


def total_variation(path: SamplePath) -> float:
    """Total variation over the path's own grid (exact for grid paths)."""
    inc = path.increments()
    if inc.ndim == 1:
        return float(np.sum(np.abs(inc)))
    return float(np.sum(np.linalg.norm(inc, axis=1)))


def realized_qv(path: SamplePath, partition: Partition | None = None):
    """Sum of outer products of increments along ``partition``.

    Returns a float for scalar paths and a (d, d) matrix otherwise.
    """
    if partition is None:
        inc = path.increments()
    else:
        idx = partition.indices_in(path.partition)
        inc = np.diff(path.values[idx], axis=0)
    if inc.ndim == 1:
        return float(np.sum(inc * inc))
    return inc.T @ inc


@dataclass(frozen=True)
class WeightProcess:
    """Weights held constant on each cell (value at the left endpoint)."""

    partition: Partition
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.shape[0] != self.partition.num_cells:
            raise InvalidArgumentError("one weight per cell required")
        if not np.all(np.isfinite(v)):
            raise InvalidArgumentError("weights must be finite")

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))


def constant_weight(partition: Partition, value: float = 1.0) -> WeightProcess:
    return WeightProcess(partition, np.full(partition.num_cells, float(value)))


def sampled_weight(partition: Partition, fn: Callable[[float], float]) -> WeightProcess:
    """Weights sampled at left endpoints, H_i = fn(t_{i-1})."""
    return WeightProcess(partition, np.array([fn(t) for t in partition.times[:-1]]))


def weighted_qv_sum(
    weights: WeightProcess,
    path: SamplePath,
    other: SamplePath | None = None,
    partition: Partition | None = None,
) -> float:
    """sum_i H_{t_{i-1}} : (dX_i)(dXhat_i)^T along the grid.

    With ``other`` omitted this is the weighted realized quadratic
    variation; with an independent second path it estimates the cross
    variation.
    """
    p = partition or weights.partition
    if p.times.shape != weights.partition.times.shape or not np.array_equal(
        p.times, weights.partition.times
    ):
        raise InvalidArgumentError("weights must be piecewise constant along the partition")
    xhat = other if other is not None else path
    idx = p.indices_in(path.partition)
    idx_hat = p.indices_in(xhat.partition)
    dx = np.diff(path.values[idx], axis=0)
    dxh = np.diff(xhat.values[idx_hat], axis=0)
    h = weights.values
    if dx.ndim == 1 and dxh.ndim == 1:
        if h.ndim != 1:
            raise InvalidArgumentError("scalar paths need scalar weights")
        return float(np.sum(h * dx * dxh))
    dx = np.atleast_2d(dx.T).T
    dxh = np.atleast_2d(dxh.T).T
    if h.ndim == 1:
        h = h[:, None, None] * np.eye(dx.shape[1])[None]
    return float(np.einsum("iab,ia,ib->", h, dx, dxh))


@dataclass(frozen=True)
class LemmaStudyRow:
    num_cells: int
    mean_abs_error: float
    stderr: float
    ratio_vs_coarser: float | None
    ratio_ok: bool | None


@dataclass(frozen=True)
class LemmaStudy:
    rows: tuple[LemmaStudyRow, ...]

    def all_ratios_ok(self) -> bool:
        checked = [r.ratio_ok for r in self.rows if r.ratio_ok is not None]
        return bool(checked) and all(checked)


def lemma_convergence_study(
    path_generator: Callable[[Partition, RngStream], SamplePath],
    weight_generator: Callable[[Partition], WeightProcess],
    cell_counts: Sequence[int],
    num_seeds: int,
    horizon: float,
    limit: float | Callable[[Partition], float],
    rng: RngStream,
    ratio_band: tuple[float, float] = (1.3, 3.0),
) -> LemmaStudy:
    """L1 error of the weighted QV sum against its analytic limit.

    For each grid size, ``num_seeds`` independent paths are generated and
    the mean absolute deviation from ``limit`` is reported with its
    standard error.  Consecutive sizes that quadruple the cell count get
    a ratio flag: mean error ratio inside ``ratio_band`` (target 2 for a
    rate-1/2 statistic).
    """
    if not cell_counts:
        raise InvalidArgumentError("cell_counts must be nonempty")
    rows: list[LemmaStudyRow] = []
    prev: tuple[int, float] | None = None
    for j, n in enumerate(cell_counts):
        part = Partition(np.linspace(0.0, horizon, n + 1))
        target = limit(part) if callable(limit) else float(limit)
        weights = weight_generator(part)
        errs = np.empty(num_seeds)
        for s in range(num_seeds):
            path = path_generator(part, rng.child(j, s))
            errs[s] = abs(weighted_qv_sum(weights, path) - target)
        mean_err = float(errs.mean())
        se = float(errs.std(ddof=1) / np.sqrt(num_seeds)) if num_seeds > 1 else 0.0
        ratio = ok = None
        if prev is not None and n == 4 * prev[0] and mean_err > 0:
            ratio = prev[1] / mean_err
            ok = ratio_band[0] <= ratio <= ratio_band[1]
        rows.append(LemmaStudyRow(n, mean_err, se, ratio, ok))
        prev = (n, mean_err)
    return LemmaStudy(tuple(rows))
