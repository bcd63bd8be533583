"""Empirical measures, quadratic Wasserstein cost, and exact derivative
calculus for cylindrical functionals u(m) = F(<phi_1, m>, ..., <phi_k, m>).

The functional linear derivative of a cylindrical u has the closed form

    delta_m u(m, x)        = sum_a  dF_a(v(m)) phi_a(x)
    delta_m^2 u(m, x, xh)  = sum_ab d2F_ab(v(m)) phi_a(x) phi_b(xh)

with v_a(m) = <phi_a, m>; the measure derivative in the Lions sense is
the x-gradient of the first expression.  Finite-difference checks below
validate these forms directly against the defining directional limits.
"""

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InvalidArgumentError, NumericOverflowError, UnsupportedError

__all__ = [
    "EmpiricalMeasure",
    "TestFunction",
    "OuterFunction",
    "CylindricalFunctional",
    "MeasurePair",
    "empirical",
    "w2_squared",
    "evaluate",
    "delta_m",
    "d_lions",
    "d2x_dm",
    "dm2",
    "dm2_cross",
    "FdRow",
    "fd_check_dm",
    "fd_check_dm2",
    "fd_orders_ok",
    "integral_identity_gap",
    "linear_combination",
]

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)
# Gauss-Legendre on [0, 1]; exact for polynomial integrands up to degree 31
_GL_LAMBDAS = 0.5 * (_GL_NODES + 1.0)
_GL_W01 = 0.5 * _GL_WEIGHTS


class EmpiricalMeasure:
    """Finitely supported measure with uniform (or explicit) weights.

    Atoms are a (N,) array for scalar state or (N, d) for vector state.
    The calculus below requires scalar atoms; the transport cost accepts
    both.
    """

    def __init__(self, atoms: np.ndarray, weights: np.ndarray | None = None):
        atoms = np.asarray(atoms, dtype=float)
        if atoms.ndim not in (1, 2) or atoms.shape[0] == 0:
            raise InvalidArgumentError("need a nonempty (N,) or (N, d) atom array")
        if not np.all(np.isfinite(atoms)):
            raise InvalidArgumentError("atoms must be finite")
        self.atoms = atoms
        if weights is not None:
            weights = np.asarray(weights, dtype=float)
            if weights.shape != (atoms.shape[0],):
                raise InvalidArgumentError("one weight per atom required")
            if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
                raise InvalidArgumentError("weights must be nonnegative and sum to 1")
        self.weights = weights
        self._sorted = None

    @property
    def num_atoms(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return 1 if self.atoms.ndim == 1 else self.atoms.shape[1]

    @property
    def is_uniform(self) -> bool:
        return self.weights is None

    def average(self, values: np.ndarray) -> float:
        if self.weights is None:
            return float(np.mean(values))
        return float(np.dot(self.weights, values))

    def mean(self):
        if self.weights is None:
            return self.atoms.mean(axis=0)
        return np.tensordot(self.weights, self.atoms, axes=1)

    def sorted_atoms(self) -> np.ndarray:
        """Cached sorted view; scalar atoms only."""
        if self.dim != 1:
            raise UnsupportedError("sorted view is defined for scalar atoms")
        if self._sorted is None:
            order = np.argsort(self.atoms, kind="stable")
            self._sorted = (self.atoms[order], order)
        return self._sorted[0]


def empirical(atoms) -> EmpiricalMeasure:
    """Uniform-weight measure on the given atoms (duplicates allowed)."""
    return EmpiricalMeasure(np.asarray(atoms, dtype=float))


def _quantile_cost(x: np.ndarray, wx: np.ndarray, y: np.ndarray, wy: np.ndarray) -> float:
    # exact squared cost of the monotone (quantile) coupling in d = 1
    cx = np.cumsum(wx)
    cy = np.cumsum(wy)
    edges = np.unique(np.concatenate([[0.0], cx, cy]))
    edges[-1] = 1.0
    lengths = np.diff(edges)
    mids = 0.5 * (edges[:-1] + edges[1:])
    ix = np.minimum(np.searchsorted(cx, mids), x.size - 1)
    iy = np.minimum(np.searchsorted(cy, mids), y.size - 1)
    return float(np.sum(lengths * (x[ix] - y[iy]) ** 2))


def w2_squared(m: EmpiricalMeasure, m_prime: EmpiricalMeasure) -> float:
    """Squared quadratic transport cost between two empirical measures.

    Scalar atoms use the quantile coupling (exact, any atom counts);
    vector atoms use an exact assignment solve and require uniform
    weights with equal atom counts.
    """
    if m.dim != m_prime.dim:
        raise InvalidArgumentError("measures must share the atom dimension")
    if m.dim == 1:
        x = m.sorted_atoms()
        y = m_prime.sorted_atoms()
        if m.is_uniform:
            wx = np.full(m.num_atoms, 1.0 / m.num_atoms)
        else:
            wx = m.weights[np.argsort(m.atoms, kind="stable")]
        if m_prime.is_uniform:
            wy = np.full(m_prime.num_atoms, 1.0 / m_prime.num_atoms)
        else:
            wy = m_prime.weights[np.argsort(m_prime.atoms, kind="stable")]
        return _quantile_cost(x, wx, y, wy)
    if not (m.is_uniform and m_prime.is_uniform):
        raise UnsupportedError("vector transport implemented for uniform weights only")
    if m.num_atoms != m_prime.num_atoms:
        raise UnsupportedError("vector transport needs equal atom counts")
    if m.num_atoms > 4096:
        raise UnsupportedError("assignment solve capped at 4096 atoms")
    diff = m.atoms[:, None, :] - m_prime.atoms[None, :, :]
    cost = np.sum(diff * diff, axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


@dataclass(frozen=True)
class TestFunction:
    """Scalar test function with exact first and second derivatives."""

    name: str
    value: Callable
    grad: Callable
    hess: Callable
    hess_bound: float = np.inf


@dataclass(frozen=True)
class OuterFunction:
    """Outer map F: R^k -> R; callables are vectorized over leading axes.

    ``grad``/``hess`` return arrays with trailing shape (k,) and (k, k).
    """

    name: str
    value: Callable
    grad: Callable
    hess: Callable
    polynomial: bool = True


@dataclass(frozen=True)
class CylindricalFunctional:
    """u(m) = F(<phi_1, m>, ..., <phi_k, m>) with exact derivative fields."""

    name: str
    outer: OuterFunction
    tests: tuple[TestFunction, ...]

    def __post_init__(self):
        if len(self.tests) < 1:
            raise InvalidArgumentError("need at least one test function")

    @property
    def k(self) -> int:
        return len(self.tests)

    @property
    def second_derivative_bounds(self) -> tuple[float, ...]:
        return tuple(t.hess_bound for t in self.tests)


def moments(u: CylindricalFunctional, m: EmpiricalMeasure) -> np.ndarray:
    v = np.array([m.average(t.value(m.atoms)) for t in u.tests])
    if not np.all(np.isfinite(v)):
        raise NumericOverflowError("non-finite test-function averages")
    return v


def evaluate(u: CylindricalFunctional, m: EmpiricalMeasure) -> float:
    """u(m) = F of the test-function averages."""
    val = float(u.outer.value(moments(u, m)))
    if not np.isfinite(val):
        raise NumericOverflowError("non-finite functional value")
    return val


def delta_m(u: CylindricalFunctional, m: EmpiricalMeasure, x) -> np.ndarray | float:
    """Canonical representative of the first functional derivative at x."""
    g = u.outer.grad(moments(u, m))
    return sum(g[a] * u.tests[a].value(x) for a in range(u.k))


def d_lions(u: CylindricalFunctional, m: EmpiricalMeasure, x):
    """x-gradient of delta_m u (the measure derivative in the Lions sense)."""
    g = u.outer.grad(moments(u, m))
    return sum(g[a] * u.tests[a].grad(x) for a in range(u.k))


def d2x_dm(u: CylindricalFunctional, m: EmpiricalMeasure, x):
    g = u.outer.grad(moments(u, m))
    return sum(g[a] * u.tests[a].hess(x) for a in range(u.k))


def dm2(u: CylindricalFunctional, m: EmpiricalMeasure, x, xh):
    h = u.outer.hess(moments(u, m))
    out = 0.0
    for a in range(u.k):
        for b in range(u.k):
            if np.any(h[a, b] != 0.0):
                out = out + h[a, b] * u.tests[a].value(x) * u.tests[b].value(xh)
    return out


def dm2_cross(u: CylindricalFunctional, m: EmpiricalMeasure, x, xh):
    """Mixed x, xh gradient of the second functional derivative."""
    h = u.outer.hess(moments(u, m))
    out = 0.0
    for a in range(u.k):
        for b in range(u.k):
            if np.any(h[a, b] != 0.0):
                out = out + h[a, b] * u.tests[a].grad(x) * u.tests[b].grad(xh)
    return out


@dataclass(frozen=True)
class MeasurePair:
    """Pair (m, m') with the exact mixture lambda m' + (1 - lambda) m."""

    m: EmpiricalMeasure
    m_prime: EmpiricalMeasure

    def mixture(self, lam: float) -> EmpiricalMeasure:
        if lam < 0.0 or lam > 1.0:
            raise InvalidArgumentError("mixture parameter must lie in [0, 1]")
        if lam == 0.0:
            return self.m
        if lam == 1.0:
            return self.m_prime
        wm = (1.0 - lam) * (
            self.m.weights if self.m.weights is not None else np.full(self.m.num_atoms, 1.0 / self.m.num_atoms)
        )
        wp = lam * (
            self.m_prime.weights
            if self.m_prime.weights is not None
            else np.full(self.m_prime.num_atoms, 1.0 / self.m_prime.num_atoms)
        )
        return EmpiricalMeasure(
            np.concatenate([self.m.atoms, self.m_prime.atoms]), np.concatenate([wm, wp])
        )


def _pairing(values_on_mp: np.ndarray, mp: EmpiricalMeasure, values_on_m: np.ndarray, m: EmpiricalMeasure) -> float:
    # <f, m' - m> for f given by its values on each atom set
    return mp.average(values_on_mp) - m.average(values_on_m)


@dataclass(frozen=True)
class FdRow:
    eps: float
    error: float
    observed_order: float | None


def _attach_orders(rows: list[tuple[float, float]]) -> list[FdRow]:
    out: list[FdRow] = []
    for i, (eps, err) in enumerate(rows):
        order = None
        if i + 1 < len(rows):
            e2, err2 = rows[i + 1]
            if err > 1e-14 and err2 > 1e-14:
                order = float(np.log(err / err2) / np.log(eps / e2))
        out.append(FdRow(eps, err, order))
    return out


def fd_check_dm(
    u: CylindricalFunctional, pair: MeasurePair, eps_list: Sequence[float]
) -> list[FdRow]:
    """Directional finite differences of u against the derivative pairing.

    Rows report |(u(m + eps (m'-m)) - u(m)) / eps  -  <delta_m u(m), m'-m>|
    and the observed decay order between consecutive eps values.
    """
    if any(e <= 0 for e in eps_list) or any(np.diff(eps_list) >= 0):
        raise InvalidArgumentError("eps_list must be positive and decreasing")
    base = evaluate(u, pair.m)
    pairing = _pairing(
        np.asarray(delta_m(u, pair.m, pair.m_prime.atoms)),
        pair.m_prime,
        np.asarray(delta_m(u, pair.m, pair.m.atoms)),
        pair.m,
    )
    rows = []
    for eps in eps_list:
        fd = (evaluate(u, pair.mixture(eps)) - base) / eps
        rows.append((float(eps), abs(fd - pairing)))
    return _attach_orders(rows)


def fd_check_dm2(
    u: CylindricalFunctional, pair: MeasurePair, eps_list: Sequence[float]
) -> list[FdRow]:
    """Same check one level down: differences of delta_m u against delta_m^2.

    The error at each eps is maximized over probe points x drawn from the
    atoms of both measures.
    """
    if any(e <= 0 for e in eps_list) or any(np.diff(eps_list) >= 0):
        raise InvalidArgumentError("eps_list must be positive and decreasing")
    probes = np.concatenate([np.atleast_1d(pair.m.atoms), np.atleast_1d(pair.m_prime.atoms)])
    base = np.asarray(delta_m(u, pair.m, probes))
    h = u.outer.hess(moments(u, pair.m))
    pairing = np.zeros_like(probes)
    for a in range(u.k):
        for b in range(u.k):
            if h[a, b] != 0.0:
                gap = pair.m_prime.average(u.tests[b].value(pair.m_prime.atoms)) - pair.m.average(
                    u.tests[b].value(pair.m.atoms)
                )
                pairing = pairing + h[a, b] * u.tests[a].value(probes) * gap
    rows = []
    for eps in eps_list:
        mixed = pair.mixture(eps)
        fd = (np.asarray(delta_m(u, mixed, probes)) - base) / eps
        rows.append((float(eps), float(np.max(np.abs(fd - pairing)))))
    return _attach_orders(rows)


def fd_orders_ok(rows: Sequence[FdRow], floor: float = 1e-13, min_order: float = 0.9) -> bool:
    """True when errors either decay at order >= 1 or sit at the roundoff
    floor (which grows like 1/eps, since the difference quotient divides
    cancellation noise by eps)."""
    for row in rows:
        if row.error <= floor / row.eps:
            continue
        if row.observed_order is not None and row.observed_order < min_order:
            return False
    return all(np.isfinite(row.error) for row in rows)


def integral_identity_gap(u: CylindricalFunctional, pair: MeasurePair) -> float:
    """Gap in u(m') - u(m) = int_0^1 <delta_m u(mixture(lam)), m'-m> dlam.

    The lambda integral uses 16-point Gauss-Legendre, exact for the
    polynomial-in-lambda integrands of polynomial outer maps.
    """
    lhs = evaluate(u, pair.m_prime) - evaluate(u, pair.m)
    rhs = 0.0
    for lam, w in zip(_GL_LAMBDAS, _GL_W01):
        mixed = pair.mixture(float(lam))
        rhs += w * _pairing(
            np.asarray(delta_m(u, mixed, pair.m_prime.atoms)),
            pair.m_prime,
            np.asarray(delta_m(u, mixed, pair.m.atoms)),
            pair.m,
        )
    return abs(lhs - rhs)


def linear_combination(
    terms: Sequence[tuple[float, CylindricalFunctional]], name: str | None = None
) -> CylindricalFunctional:
    """Cylindrical functional for sum_j c_j u_j (test lists concatenated)."""
    if not terms:
        raise InvalidArgumentError("need at least one term")
    coefs = [float(c) for c, _ in terms]
    funcs = [u for _, u in terms]
    tests: list[TestFunction] = []
    slices = []
    start = 0
    for u in funcs:
        tests.extend(u.tests)
        slices.append(slice(start, start + u.k))
        start += u.k

    def value(v):
        return sum(c * f.outer.value(v[..., s]) for c, f, s in zip(coefs, funcs, slices))

    def grad(v):
        out = np.zeros(v.shape)
        for c, f, s in zip(coefs, funcs, slices):
            out[..., s] = c * f.outer.grad(v[..., s])
        return out

    def hess(v):
        out = np.zeros(v.shape + (start,))
        for c, f, s in zip(coefs, funcs, slices):
            out[..., s, s] = c * f.outer.hess(v[..., s])
        return out

    outer = OuterFunction(
        name or "+".join(f"{c}*{f.name}" for c, f in zip(coefs, funcs)),
        value,
        grad,
        hess,
        polynomial=all(f.outer.polynomial for f in funcs),
    )
    return CylindricalFunctional(outer.name, outer, tuple(tests))
