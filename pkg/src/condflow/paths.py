"""Time grids, sample paths, and simulators for the driving processes.

Paths are stored dense on their grid and treated as piecewise linear
between grid points.  Every simulator is a pure function of its inputs
and an :class:`RngStream`, so runs are reproducible bit-for-bit.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .errors import InvalidArgumentError

__all__ = [
    "Partition",
    "SamplePath",
    "SdeCoefficients",
    "RngStream",
    "make_uniform_partition",
    "simulate_brownian",
    "simulate_factor",
    "constant_coefficients",
]


@dataclass(frozen=True)
class Partition:
    """Strictly increasing grid of times on [0, T] starting at 0."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", t)
        if t.ndim != 1 or t.size < 2:
            raise InvalidArgumentError("partition needs at least two time points")
        if t[0] != 0.0:
            raise InvalidArgumentError("partition must start at 0")
        if not np.all(np.isfinite(t)):
            raise InvalidArgumentError("partition times must be finite")
        if np.any(np.diff(t) <= 0):
            raise InvalidArgumentError("partition times must be strictly increasing")

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def num_cells(self) -> int:
        return self.times.size - 1

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def mesh(self) -> float:
        return float(np.max(self.deltas))

    def cell_of(self, s: float) -> int:
        """Index i with s in (t_{i-1}, t_i]; 0 maps to the first cell."""
        if s < self.times[0] or s > self.times[-1]:
            raise InvalidArgumentError(f"time {s} outside [0, {self.horizon}]")
        i = int(np.searchsorted(self.times, s, side="left"))
        return max(i, 1)

    def indices_in(self, finer: "Partition") -> np.ndarray:
        """Positions of this grid's points inside a finer grid.

        Raises if this partition is not subordinate to ``finer``.
        """
        idx = np.searchsorted(finer.times, self.times)
        idx = np.clip(idx, 0, finer.times.size - 1)
        # searchsorted can land one slot right of the matching float
        left = np.clip(idx - 1, 0, finer.times.size - 1)
        use_left = np.abs(finer.times[left] - self.times) < np.abs(finer.times[idx] - self.times)
        idx = np.where(use_left, left, idx)
        if not np.allclose(finer.times[idx], self.times, rtol=0.0, atol=1e-12):
            raise InvalidArgumentError("partition is not subordinate to the finer grid")
        return idx


def make_uniform_partition(horizon: float, num_cells: int) -> Partition:
    """Equispaced grid with ``num_cells`` cells on [0, horizon]."""
    if not horizon > 0:
        raise InvalidArgumentError("horizon must be positive")
    if num_cells < 1:
        raise InvalidArgumentError("need at least one cell")
    return Partition(np.linspace(0.0, float(horizon), num_cells + 1))


@dataclass(frozen=True)
class SamplePath:
    """One realization of a process on a grid.

    ``finite_variation`` and ``martingale`` (both started at 0) are an
    optional decomposition with values = values[0] + A + M on every grid
    point; simulators construct values from the parts so the identity is
    exact.
    """

    partition: Partition
    values: np.ndarray
    finite_variation: np.ndarray | None = None
    martingale: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.shape[0] != self.partition.times.size:
            raise InvalidArgumentError("values length must match the partition")
        if (self.finite_variation is None) != (self.martingale is None):
            raise InvalidArgumentError("decomposition needs both parts")
        if self.finite_variation is not None:
            a = np.asarray(self.finite_variation, dtype=float)
            m = np.asarray(self.martingale, dtype=float)
            object.__setattr__(self, "finite_variation", a)
            object.__setattr__(self, "martingale", m)
            if a.shape != v.shape or m.shape != v.shape:
                raise InvalidArgumentError("decomposition shape mismatch")
            if np.any(a[0] != 0.0) or np.any(m[0] != 0.0):
                raise InvalidArgumentError("decomposition parts must start at 0")
            scale = 1.0 + np.max(np.abs(v))
            if np.max(np.abs(v[0] + a + m - v)) > 1e-9 * scale:
                raise InvalidArgumentError("decomposition does not reconstruct the path")

    @property
    def decomposition(self) -> tuple[np.ndarray, np.ndarray] | None:
        if self.finite_variation is None:
            return None
        return self.finite_variation, self.martingale

    @property
    def dim(self) -> int:
        return 1 if self.values.ndim == 1 else self.values.shape[1]

    def value_at(self, s: float) -> np.ndarray | float:
        """Piecewise-linear evaluation at an arbitrary time in [0, T]."""
        t = self.partition.times
        if s < t[0] or s > t[-1]:
            raise InvalidArgumentError(f"time {s} outside [0, {t[-1]}]")
        if self.values.ndim == 1:
            return float(np.interp(s, t, self.values))
        return np.array([np.interp(s, t, self.values[:, j]) for j in range(self.values.shape[1])])

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)


@dataclass(frozen=True)
class SdeCoefficients:
    """Coefficient fields for the controlled state and the factor.

    State coefficients are callables ``(t, x, y, m, a)`` vectorized over
    ``x`` (and ``a`` when present); factor coefficients are ``(t, y)``.
    ``bounds`` records sup-norms used by modulus checks.
    """

    drift: Callable
    sigma: Callable
    sigma0: Callable
    k: Callable
    gamma: Callable
    gamma0: Callable
    bounds: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for key, val in self.bounds.items():
            if not np.isfinite(val) or val < 0:
                raise InvalidArgumentError(f"bound {key!r} must be finite and nonnegative")


def constant_coefficients(
    b: float = 0.0,
    sigma: float = 0.0,
    sigma0: float = 0.0,
    k: float = 0.0,
    gamma: float = 0.0,
    gamma0: float = 0.0,
) -> SdeCoefficients:
    """Coefficients that ignore state, factor, measure and control."""
    return SdeCoefficients(
        drift=lambda t, x, y, m, a: np.broadcast_to(b, np.shape(x)) if np.ndim(x) else b,
        sigma=lambda t, x, y, m, a: np.broadcast_to(sigma, np.shape(x)) if np.ndim(x) else sigma,
        sigma0=lambda t, x, y, m, a: np.broadcast_to(sigma0, np.shape(x)) if np.ndim(x) else sigma0,
        k=lambda t, y: k,
        gamma=lambda t, y: gamma,
        gamma0=lambda t, y: gamma0,
        bounds={
            "b": abs(b),
            "sigma": abs(sigma),
            "sigma0": abs(sigma0),
            "k": abs(k),
            "gamma": abs(gamma),
            "gamma0": abs(gamma0),
        },
    )


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by (seed, stream id).

    Streams with distinct keys are independent by construction (Philox
    keyed through a SeedSequence).  ``child`` derives nested streams for
    outer repetitions, particles blocks, etc. without collisions.
    """

    seed: int
    stream: int = 0
    path: tuple[int, ...] = ()

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream, *self.path))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *ids: int) -> "RngStream":
        return replace(self, path=self.path + tuple(int(i) for i in ids))

    def key(self) -> list[int]:
        return [self.seed, self.stream, *self.path]


def simulate_brownian(partition: Partition, dim: int, rng: RngStream) -> SamplePath:
    """Standard Brownian path on the grid, started at 0.

    Increments over the cells are independent N(0, dt * I) draws; the
    decomposition is (A = 0, M = path).
    """
    if dim < 1:
        raise InvalidArgumentError("dim must be >= 1")
    gen = rng.generator()
    dt = partition.deltas
    if dim == 1:
        inc = gen.normal(size=dt.size) * np.sqrt(dt)
        mart = np.concatenate([[0.0], np.cumsum(inc)])
    else:
        inc = gen.normal(size=(dt.size, dim)) * np.sqrt(dt)[:, None]
        mart = np.vstack([np.zeros(dim), np.cumsum(inc, axis=0)])
    return SamplePath(partition, mart.copy(), np.zeros_like(mart), mart)


def simulate_factor(
    coeffs: SdeCoefficients,
    y0: float,
    partition: Partition,
    common_path: SamplePath,
    rng: RngStream,
) -> SamplePath:
    """Euler path of the scalar factor dY = k dt + gamma dB + gamma0 dW0.

    ``common_path`` supplies the shared noise W0 and must live on the same
    partition; B is an independent Brownian drawn from ``rng``.
    """
    if common_path.partition.times.shape != partition.times.shape or not np.array_equal(
        common_path.partition.times, partition.times
    ):
        raise InvalidArgumentError("common path must share the partition")
    gen = rng.generator()
    dt = partition.deltas
    n = dt.size
    db = gen.normal(size=n) * np.sqrt(dt)
    dw0 = np.diff(common_path.values)
    fv = np.zeros(n + 1)
    mart = np.zeros(n + 1)
    y = float(y0)
    for i in range(n):
        t = partition.times[i]
        fv[i + 1] = fv[i] + coeffs.k(t, y) * dt[i]
        mart[i + 1] = mart[i] + coeffs.gamma(t, y) * db[i] + coeffs.gamma0(t, y) * dw0[i]
        y = y0 + fv[i + 1] + mart[i + 1]
    values = y0 + fv + mart
    return SamplePath(partition, values, fv, mart)
