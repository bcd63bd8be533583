"""Mean-field control with common noise on a solvable linear-quadratic
instance: value-function generator, residuals of the dynamic-programming
equation, Monte Carlo checks of the dynamic programming principle, and a
Lipschitz audit of the generator in the measure argument.

The concrete instance is scalar with dX = a dt + sigma dW + sigma0 dW0,
running reward -a^2/2 - (q/2)(x - mean)^2 - (r/2) mean^2 and terminal
reward -(c_g/2) Var - (c_m/2) mean^2.  A quadratic-in-moments ansatz
V = P(t) Var(m) + R(t) mean(m)^2 + c(t) closes the equation into scalar
Riccati equations dP/dt = q/2 - 2 P^2, dR/dt = r/2 - 2 R^2 and
dc/dt = -(P sigma^2 + R sigma0^2), solved backward by fixed-step RK4
with step halving.
"""

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import InvalidArgumentError
from .measures import EmpiricalMeasure, w2_squared
from .particle import gaussian_quantile_initial, simulate_ensemble
from .paths import RngStream, SdeCoefficients, make_uniform_partition

__all__ = [
    "GaussianMoments",
    "measure_mean",
    "measure_variance",
    "ControlProblem",
    "make_lq_problem",
    "LqValue",
    "PerturbedValue",
    "zero_value",
    "solve_lq_value",
    "AffineFeedback",
    "RiccatiFeedback",
    "constant_feedback",
    "optimal_feedback",
    "suggest_control_bound",
    "generator",
    "HjbNode",
    "HjbReport",
    "hjb_residual",
    "nonparametric_gap",
    "DppResult",
    "dpp_check",
    "constant_control_gap",
    "AuditRow",
    "lipschitz_audit",
    "default_lattice",
]


# ---------------------------------------------------------------------------
# measure arguments


@dataclass(frozen=True)
class GaussianMoments:
    """Gaussian surrogate for a measure that only enters through (mean, var)."""

    mean: float
    var: float

    def __post_init__(self):
        if self.var < 0:
            raise InvalidArgumentError("variance must be nonnegative")


def measure_mean(m) -> float:
    if isinstance(m, GaussianMoments):
        return m.mean
    return float(m.average(m.atoms))


def measure_variance(m) -> float:
    if isinstance(m, GaussianMoments):
        return m.var
    mu = measure_mean(m)
    return float(m.average((m.atoms - mu) ** 2))


# ---------------------------------------------------------------------------
# problem and value candidates


@dataclass(frozen=True)
class ControlProblem:
    """Controlled dynamics plus rewards over a compact control interval."""

    coeffs: SdeCoefficients
    running_reward: Callable  # (t, y, m, x, a) vectorized over x, a
    terminal_reward: Callable  # (y, m)
    horizon: float
    a_max: float
    constants: Mapping[str, float]

    def __post_init__(self):
        if not np.isfinite(self.a_max) or self.a_max <= 0:
            raise InvalidArgumentError("control bound must be positive and finite")


def make_lq_problem(
    q: float = 1.0,
    r: float = 0.5,
    c_g: float = 0.5,
    c_m: float = 0.5,
    sigma: float = 0.4,
    sigma0: float = 0.3,
    horizon: float = 1.0,
    a_max: float | None = None,
) -> ControlProblem:
    """The scalar linear-quadratic instance with common noise.

    When ``a_max`` is omitted it is set to twice the sup of the optimal
    feedback over the default residual lattice, so the clamp never binds
    there.
    """
    constants = {
        "q": q,
        "r": r,
        "c_g": c_g,
        "c_m": c_m,
        "sigma": sigma,
        "sigma0": sigma0,
    }

    coeffs = SdeCoefficients(
        drift=lambda t, x, y, m, a: a,
        sigma=lambda t, x, y, m, a: np.broadcast_to(sigma, np.shape(x)) if np.ndim(x) else sigma,
        sigma0=lambda t, x, y, m, a: np.broadcast_to(sigma0, np.shape(x)) if np.ndim(x) else sigma0,
        k=lambda t, y: 0.0,
        gamma=lambda t, y: 0.0,
        gamma0=lambda t, y: 0.0,
        bounds={"sigma": abs(sigma), "sigma0": abs(sigma0)},
    )

    def running_reward(t, y, m, x, a):
        mu = measure_mean(m)
        return -0.5 * a**2 - 0.5 * q * (x - mu) ** 2 - 0.5 * r * mu**2

    def terminal_reward(y, m):
        return -0.5 * c_g * measure_variance(m) - 0.5 * c_m * measure_mean(m) ** 2

    if a_max is None:
        probe = ControlProblem(coeffs, running_reward, terminal_reward, horizon, 1.0, constants)
        value = solve_lq_value(probe)
        a_max = suggest_control_bound(value)
    return ControlProblem(coeffs, running_reward, terminal_reward, horizon, float(a_max), constants)


class LqValue:
    """Quadratic-in-moments value candidate backed by solved trajectories."""

    def __init__(self, ts: np.ndarray, p: np.ndarray, r_coef: np.ndarray, c: np.ndarray, constants: Mapping[str, float], ode_error: float):
        self.ts = ts
        self.p = p
        self.r_coef = r_coef
        self.c = c
        self.constants = dict(constants)
        self.ode_error = ode_error

    def quad_coeffs(self, t: float) -> dict[str, float]:
        q = self.constants["q"]
        r = self.constants["r"]
        sigma = self.constants["sigma"]
        sigma0 = self.constants["sigma0"]
        p = float(np.interp(t, self.ts, self.p))
        rr = float(np.interp(t, self.ts, self.r_coef))
        cc = float(np.interp(t, self.ts, self.c))
        return {
            "P": p,
            "R": rr,
            "c": cc,
            "dP": 0.5 * q - 2.0 * p * p,
            "dR": 0.5 * r - 2.0 * rr * rr,
            "dc": -(p * sigma**2 + rr * sigma0**2),
        }

    def value(self, t: float, m) -> float:
        qc = self.quad_coeffs(t)
        return qc["P"] * measure_variance(m) + qc["R"] * measure_mean(m) ** 2 + qc["c"]

    def time_derivative(self, t: float, m) -> float:
        qc = self.quad_coeffs(t)
        return qc["dP"] * measure_variance(m) + qc["dR"] * measure_mean(m) ** 2 + qc["dc"]

    def d_lions(self, t: float, m, x):
        qc = self.quad_coeffs(t)
        mu = measure_mean(m)
        return 2.0 * qc["P"] * (np.asarray(x) - mu) + 2.0 * qc["R"] * mu

    def d2x(self, t: float, m, x):
        qc = self.quad_coeffs(t)
        return np.broadcast_to(2.0 * qc["P"], np.shape(x)) if np.ndim(x) else 2.0 * qc["P"]

    def cross(self, t: float, m, x=None, xh=None):
        qc = self.quad_coeffs(t)
        return 2.0 * (qc["R"] - qc["P"])

    def dy(self, t, m):
        return 0.0

    def dyy(self, t, m):
        return 0.0

    def d_lions_dy(self, t, m, x):
        return np.zeros(np.shape(x)) if np.ndim(x) else 0.0


class PerturbedValue:
    """Base candidate plus eps * Var(m); used to confirm the residual test
    can fail."""

    def __init__(self, base: LqValue, eps: float):
        self.base = base
        self.eps = float(eps)
        self.constants = base.constants

    def quad_coeffs(self, t: float) -> dict[str, float]:
        qc = dict(self.base.quad_coeffs(t))
        qc["P"] = qc["P"] + self.eps
        return qc

    def value(self, t, m):
        return self.base.value(t, m) + self.eps * measure_variance(m)

    def time_derivative(self, t, m):
        return self.base.time_derivative(t, m)

    def d_lions(self, t, m, x):
        mu = measure_mean(m)
        return self.base.d_lions(t, m, x) + 2.0 * self.eps * (np.asarray(x) - mu)

    def d2x(self, t, m, x):
        return self.base.d2x(t, m, x) + 2.0 * self.eps

    def cross(self, t, m, x=None, xh=None):
        return self.base.cross(t, m) - 2.0 * self.eps

    def dy(self, t, m):
        return 0.0

    def dyy(self, t, m):
        return 0.0

    def d_lions_dy(self, t, m, x):
        return self.base.d_lions_dy(t, m, x)


def zero_value(constants: Mapping[str, float] | None = None) -> LqValue:
    ts = np.array([0.0, 1.0])
    zero = np.zeros(2)
    consts = {"q": 0.0, "r": 0.0, "sigma": 0.0, "sigma0": 0.0}
    if constants:
        consts.update(constants)
    return LqValue(ts, zero, zero.copy(), zero.copy(), consts, 0.0)


def _rk4_backward(rhs: Callable, terminal: np.ndarray, t1: float, t0: float, steps: int) -> tuple[np.ndarray, np.ndarray]:
    ts = np.linspace(t1, t0, steps + 1)
    h = (t0 - t1) / steps  # negative
    out = np.empty((steps + 1, terminal.size))
    out[0] = terminal
    state = terminal.astype(float)
    for i in range(steps):
        t = ts[i]
        k1 = rhs(t, state)
        k2 = rhs(t + 0.5 * h, state + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, state + 0.5 * h * k2)
        k4 = rhs(t + h, state + h * k3)
        state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[i + 1] = state
    return ts, out


def solve_lq_value(
    problem: ControlProblem, tol: float = 1e-8, initial_steps: int = 64, min_steps: int = 4096
) -> LqValue:
    """Backward RK4 solve of the Riccati system with step halving.

    Halves the step until two successive solutions agree below ``tol`` at
    shared grid points; the terminal values are imposed exactly.  The
    stored grid is refined to at least ``min_steps`` so that the linear
    interpolation used between nodes stays below the solve tolerance.
    """
    consts = problem.constants
    q, r = consts["q"], consts["r"]
    sigma, sigma0 = consts["sigma"], consts["sigma0"]
    terminal = np.array([-0.5 * consts["c_g"], -0.5 * consts["c_m"], 0.0])

    def rhs(t, s):
        p, rr, _ = s
        return np.array([0.5 * q - 2.0 * p * p, 0.5 * r - 2.0 * rr * rr, -(p * sigma**2 + rr * sigma0**2)])

    steps = initial_steps
    ts, sol = _rk4_backward(rhs, terminal, problem.horizon, 0.0, steps)
    while True:
        ts2, sol2 = _rk4_backward(rhs, terminal, problem.horizon, 0.0, 2 * steps)
        err = float(np.max(np.abs(sol2[::2] - sol)))
        ts, sol, steps = ts2, sol2, 2 * steps
        if (err < tol and steps >= min_steps) or steps >= 1 << 17:
            break
    order = np.argsort(ts)
    ts = ts[order]
    sol = sol[order]
    # pin the terminal condition exactly
    sol[-1] = terminal
    return LqValue(ts, sol[:, 0], sol[:, 1], sol[:, 2], consts, err)


# ---------------------------------------------------------------------------
# feedback controls


@dataclass(frozen=True)
class AffineFeedback:
    """a(x) = clamp(c0 + c1 (x - mean(m))) into [-a_max, a_max]."""

    c0: float
    c1: float
    a_max: float
    name: str = "affine"

    def __call__(self, t, x, m):
        mu = measure_mean(m)
        return np.clip(self.c0 + self.c1 * (np.asarray(x) - mu), -self.a_max, self.a_max)


@dataclass(frozen=True)
class RiccatiFeedback:
    """Clamped optimal feedback 2P(t)(x - mean) + 2R(t) mean."""

    value: LqValue
    a_max: float
    name: str = "riccati-optimal"

    def __call__(self, t, x, m):
        qc = self.value.quad_coeffs(t)
        mu = measure_mean(m)
        raw = 2.0 * qc["P"] * (np.asarray(x) - mu) + 2.0 * qc["R"] * mu
        return np.clip(raw, -self.a_max, self.a_max)


def constant_feedback(a: float, a_max: float) -> AffineFeedback:
    if abs(a) > a_max:
        raise InvalidArgumentError("constant control outside the control set")
    return AffineFeedback(float(a), 0.0, a_max, name=f"constant({a})")


def optimal_feedback(value: LqValue, a_max: float) -> RiccatiFeedback:
    return RiccatiFeedback(value, a_max)


def suggest_control_bound(
    value: LqValue, mean_max: float = 1.0, var_max: float = 2.0, spread: float = 3.0
) -> float:
    """Twice the sup of |optimal feedback| over the default lattice box."""
    p_max = float(np.max(np.abs(value.p)))
    r_max = float(np.max(np.abs(value.r_coef)))
    return 2.0 * (2.0 * p_max * spread * np.sqrt(var_max) + 2.0 * r_max * mean_max)


# ---------------------------------------------------------------------------
# generator evaluation


def _norm_pdf(z):
    return np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)


def _censored_affine_moments(alpha, beta, bound):
    """E[W], E[W Z], E[W^2] for W = clip(alpha + beta Z, -bound, bound), Z ~ N(0,1).

    Vectorized over alpha/beta arrays.
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    sign = np.where(beta < 0, -1.0, 1.0)
    b_abs = np.abs(beta)
    lo, hi = -bound, bound
    with np.errstate(divide="ignore", invalid="ignore"):
        a_edge = np.where(b_abs > 0, (lo - alpha) / np.where(b_abs > 0, b_abs, 1.0), -np.inf)
        b_edge = np.where(b_abs > 0, (hi - alpha) / np.where(b_abs > 0, b_abs, 1.0), np.inf)
    ca, cb = ndtr(a_edge), ndtr(b_edge)
    a_fin = np.where(np.isfinite(a_edge), a_edge, 0.0)
    b_fin = np.where(np.isfinite(b_edge), b_edge, 0.0)
    pa = np.where(np.isfinite(a_edge), _norm_pdf(a_fin), 0.0)
    pb = np.where(np.isfinite(b_edge), _norm_pdf(b_fin), 0.0)
    a_pa = a_fin * pa
    b_pb = b_fin * pb
    p_mid = cb - ca
    z2_mid = p_mid + a_pa - b_pb
    ew = lo * ca + hi * (1.0 - cb) + alpha * p_mid + b_abs * (pa - pb)
    ewz = -lo * pa + hi * pb + alpha * (pa - pb) + b_abs * z2_mid
    ew2 = (
        lo * lo * ca
        + hi * hi * (1.0 - cb)
        + alpha * alpha * p_mid
        + 2.0 * alpha * b_abs * (pa - pb)
        + b_abs * b_abs * z2_mid
    )
    clipped_const = np.clip(alpha, lo, hi)
    ew = np.where(b_abs == 0, clipped_const, ew)
    ewz = np.where(b_abs == 0, 0.0, sign * ewz)
    ew2 = np.where(b_abs == 0, clipped_const**2, ew2)
    return ew, ewz, ew2


def _lq_generator_grid(problem: ControlProblem, value, t: float, mean: float, var: float, c0, c1):
    """Generator values on a (c0, c1) grid under the Gaussian surrogate."""
    consts = problem.constants
    q, r = consts["q"], consts["r"]
    sigma, sigma0 = consts["sigma"], consts["sigma0"]
    qc = value.quad_coeffs(t)
    s = np.sqrt(var)
    ew, ewz, ew2 = _censored_affine_moments(np.asarray(c0, dtype=float), np.asarray(c1, dtype=float) * s, problem.a_max)
    fbar = -0.5 * ew2 - 0.5 * q * var - 0.5 * r * mean**2
    drift = 2.0 * qc["P"] * s * ewz + 2.0 * qc["R"] * mean * ew
    second = qc["P"] * (sigma**2 + sigma0**2)
    cross = sigma0**2 * (qc["R"] - qc["P"])
    dtv = qc["dP"] * var + qc["dR"] * mean**2 + qc["dc"]
    return dtv + fbar + drift + second + cross


def generator(problem: ControlProblem, value, t: float, y: float, m, control) -> float:
    """Reward-augmented generator of the value candidate at one point.

    Empirical measures evaluate every integral as an atom average (the
    double integral as a full double average); Gaussian surrogates use
    exact censored-Gaussian moments and require an affine feedback.
    """
    if isinstance(m, GaussianMoments):
        if not isinstance(control, AffineFeedback):
            raise InvalidArgumentError("surrogate route needs an affine feedback")
        return float(
            _lq_generator_grid(problem, value, t, m.mean, m.var, control.c0, control.c1)
        )
    x = m.atoms
    a = np.asarray(control(t, x, m), dtype=float)
    if np.max(np.abs(a)) > problem.a_max + 1e-12:
        raise InvalidArgumentError("control values escape the control set")
    coeffs = problem.coeffs
    f_vals = np.asarray(problem.running_reward(t, y, m, x, a), dtype=float)
    b = np.asarray(coeffs.drift(t, x, y, m, a), dtype=float)
    s = np.asarray(coeffs.sigma(t, x, y, m, a), dtype=float)
    s0 = np.asarray(coeffs.sigma0(t, x, y, m, a), dtype=float)
    dl = np.asarray(value.d_lions(t, m, x), dtype=float)
    d2 = np.broadcast_to(np.asarray(value.d2x(t, m, x), dtype=float), x.shape)
    cr = value.cross(t, m)
    gamma = coeffs.gamma(t, y)
    gamma0 = coeffs.gamma0(t, y)
    k_t = coeffs.k(t, y)
    dly = np.broadcast_to(np.asarray(value.d_lions_dy(t, m, x), dtype=float), x.shape)
    total = value.time_derivative(t, m)
    total += k_t * value.dy(t, m) + 0.5 * (gamma**2 + gamma0**2) * value.dyy(t, m)
    total += m.average(f_vals)
    total += m.average(b * dl)
    total += 0.5 * m.average((s**2 + s0**2) * d2)
    total += gamma0 * m.average(s0 * dly)
    if np.ndim(cr) == 0:
        total += 0.5 * float(cr) * m.average(s0) ** 2
    else:
        w = np.full(x.size, 1.0 / x.size) if m.weights is None else m.weights
        total += 0.5 * float((w * s0) @ np.asarray(cr) @ (w * s0))
    return float(total)


# ---------------------------------------------------------------------------
# dynamic-programming residuals on the moment lattice


@dataclass(frozen=True)
class HjbNode:
    t: float
    mean: float
    var: float
    residual: float
    best_c0: float
    best_c1: float


@dataclass(frozen=True)
class HjbReport:
    nodes: tuple[HjbNode, ...]
    max_abs_residual: float
    terminal_gap: float
    tol: float
    passed: bool


def default_lattice(horizon: float = 1.0):
    return (
        np.linspace(0.0, horizon, 9),
        np.linspace(-1.0, 1.0, 5),
        np.linspace(0.25, 2.0, 5),
    )


def _refined_sup(problem, value, t, mean, var, c0_span, c1_span):
    c0_lo, c0_hi = -c0_span, c0_span
    c1_lo, c1_hi = -c1_span, c1_span
    best = (-np.inf, 0.0, 0.0)
    for stage, pts in enumerate((41, 21, 21)):
        c0s = np.linspace(c0_lo, c0_hi, pts)
        c1s = np.linspace(c1_lo, c1_hi, pts)
        grid0, grid1 = np.meshgrid(c0s, c1s, indexing="ij")
        vals = _lq_generator_grid(problem, value, t, mean, var, grid0.ravel(), grid1.ravel())
        idx = int(np.argmax(vals))
        b0, b1 = grid0.ravel()[idx], grid1.ravel()[idx]
        if vals[idx] > best[0]:
            best = (float(vals[idx]), float(b0), float(b1))
        step0 = (c0_hi - c0_lo) / (pts - 1)
        step1 = (c1_hi - c1_lo) / (pts - 1)
        c0_lo, c0_hi = b0 - 1.5 * step0, b0 + 1.5 * step0
        c1_lo, c1_hi = b1 - 1.5 * step1, b1 + 1.5 * step1
    return best


def hjb_residual(
    problem: ControlProblem,
    value,
    t_nodes: np.ndarray | None = None,
    mean_nodes: np.ndarray | None = None,
    var_nodes: np.ndarray | None = None,
    tol: float = 1e-4,
) -> HjbReport:
    """Residual of the dynamic-programming equation over the moment lattice.

    At each (t, mean, var) node the inner sup runs over the clamped
    affine feedback family on a refined (c0, c1) grid; the optimizer of
    the instance is itself a clamped affine map, so the family is exact
    up to grid resolution.  The residual is minus the sup of the
    reward-augmented generator; terminal exactness |V(T) - g| is checked
    on the same (mean, var) nodes.
    """
    if t_nodes is None or mean_nodes is None or var_nodes is None:
        t_def, m_def, v_def = default_lattice(problem.horizon)
        t_nodes = t_def if t_nodes is None else t_nodes
        mean_nodes = m_def if mean_nodes is None else mean_nodes
        var_nodes = v_def if var_nodes is None else var_nodes
    if len(t_nodes) == 0 or len(mean_nodes) == 0 or len(var_nodes) == 0:
        raise InvalidArgumentError("lattice must be nonempty")
    c0_span = problem.a_max
    c1_span = problem.a_max
    nodes = []
    for t in t_nodes:
        for mu in mean_nodes:
            for var in var_nodes:
                sup, b0, b1 = _refined_sup(problem, value, float(t), float(mu), float(var), c0_span, c1_span)
                nodes.append(HjbNode(float(t), float(mu), float(var), -sup, b0, b1))
    terminal_gap = 0.0
    for mu in mean_nodes:
        for var in var_nodes:
            m = GaussianMoments(float(mu), float(var))
            gap = abs(value.value(problem.horizon, m) - problem.terminal_reward(0.0, m))
            terminal_gap = max(terminal_gap, gap)
    max_abs = max(abs(nd.residual) for nd in nodes)
    return HjbReport(tuple(nodes), max_abs, terminal_gap, tol, max_abs <= tol and terminal_gap == 0.0)


def nonparametric_gap(
    problem: ControlProblem, value, t: float, m: EmpiricalMeasure, num_bins: int = 33
) -> dict[str, float]:
    """Spot-check of the affine-family restriction at one node.

    Compares the affine-family sup against the sup over piecewise-constant
    -in-x controls (per-bin pointwise maximization) and the exact
    pointwise optimizer, all evaluated on the same atom cloud.
    """
    x = np.sort(m.atoms)
    cloud = EmpiricalMeasure(x)
    dl = np.asarray(value.d_lions(t, cloud, x), dtype=float)

    def a_part(a):
        return -0.5 * a**2 + a * dl

    pointwise = float(np.mean(a_part(np.clip(dl, -problem.a_max, problem.a_max))))
    bins = np.array_split(np.arange(x.size), num_bins)
    binned = 0.0
    for idx in bins:
        if idx.size == 0:
            continue
        a_bin = float(np.clip(dl[idx].mean(), -problem.a_max, problem.a_max))
        binned += float(a_part(a_bin)[idx].sum())
    binned /= x.size
    best = -np.inf
    mu = measure_mean(cloud)
    span0 = span1 = problem.a_max
    lo0, hi0, lo1, hi1 = -span0, span0, -span1, span1
    for pts in (41, 21, 21):
        c0s = np.linspace(lo0, hi0, pts)
        c1s = np.linspace(lo1, hi1, pts)
        g0, g1 = np.meshgrid(c0s, c1s, indexing="ij")
        a_grid = np.clip(
            g0.ravel()[:, None] + g1.ravel()[:, None] * (x - mu)[None, :],
            -problem.a_max,
            problem.a_max,
        )
        vals = (-0.5 * a_grid**2 + a_grid * dl[None, :]).mean(axis=1)
        i = int(np.argmax(vals))
        if vals[i] > best:
            best = float(vals[i])
        b0, b1 = g0.ravel()[i], g1.ravel()[i]
        s0 = (hi0 - lo0) / (pts - 1)
        s1 = (hi1 - lo1) / (pts - 1)
        lo0, hi0 = b0 - 1.5 * s0, b0 + 1.5 * s0
        lo1, hi1 = b1 - 1.5 * s1, b1 + 1.5 * s1
    return {
        "pointwise_sup": pointwise,
        "affine_sup": best,
        "binned_sup": binned,
        "family_gap": pointwise - best,
    }


# ---------------------------------------------------------------------------
# dynamic programming principle


@dataclass(frozen=True)
class DppResult:
    estimate: float
    stderr: float
    tol: float
    verdict: str
    oracle_gap: float | None


def _shift_coeffs(coeffs: SdeCoefficients, t0: float) -> SdeCoefficients:
    return SdeCoefficients(
        drift=lambda t, x, y, m, a: coeffs.drift(t0 + t, x, y, m, a),
        sigma=lambda t, x, y, m, a: coeffs.sigma(t0 + t, x, y, m, a),
        sigma0=lambda t, x, y, m, a: coeffs.sigma0(t0 + t, x, y, m, a),
        k=lambda t, y: coeffs.k(t0 + t, y),
        gamma=lambda t, y: coeffs.gamma(t0 + t, y),
        gamma0=lambda t, y: coeffs.gamma0(t0 + t, y),
        bounds=coeffs.bounds,
    )


def dpp_check(
    problem: ControlProblem,
    value,
    control,
    t0: float,
    theta: float,
    mean0: float,
    var0: float,
    num_particles: int,
    num_cells: int,
    outer_paths: int,
    rng: RngStream,
    tolerance_c: float = 2.0,
) -> DppResult:
    """Monte Carlo gap E[int f ds + V(theta, mu_theta)] - V(t0, mu_t0).

    The gap should vanish (within 3 SE + C dt) for the optimal feedback
    and be significantly negative for suboptimal controls; for constant
    controls the result carries the exact linear-ansatz prediction.
    """
    if theta <= t0:
        raise InvalidArgumentError("need theta > t0")
    part = make_uniform_partition(theta - t0, num_cells)
    dt = part.deltas
    coeffs = _shift_coeffs(problem.coeffs, t0)

    def shifted_control(t, x, m):
        return control(t0 + t, x, m)

    initial = gaussian_quantile_initial(mean0, var0)
    gaps = np.empty(outer_paths)
    for rep in range(outer_paths):
        ens = simulate_ensemble(
            coeffs, initial, num_particles, part, rng.child(rep), control=shifted_control
        )
        reward = 0.0
        for k in range(num_cells):
            t = t0 + float(part.times[k])
            m_k = ens.empirical_at(k)
            f_vals = problem.running_reward(t, 0.0, m_k, ens.states[k], ens.control_values[k])
            reward += float(np.mean(f_vals)) * dt[k]
        m_end = ens.empirical_at(num_cells)
        m_start = ens.empirical_at(0)
        gaps[rep] = reward + value.value(theta, m_end) - value.value(t0, m_start)
    estimate = float(gaps.mean())
    se = float(gaps.std(ddof=1) / np.sqrt(outer_paths)) if outer_paths > 1 else 0.0
    tol = 3.0 * se + tolerance_c * float(dt.max())
    if abs(estimate) <= tol:
        verdict = "optimal-consistent"
    elif estimate < -3.0 * se:
        verdict = "suboptimal"
    elif estimate > tol:
        verdict = "dpp-violation"
    else:
        verdict = "inconclusive"
    oracle = None
    if isinstance(control, AffineFeedback) and control.c1 == 0.0:
        atoms = initial(None, num_particles)
        mu0 = float(atoms.mean())
        v0 = float(atoms.var())
        oracle = constant_control_gap(problem, value, control.c0, t0, theta, mu0, v0)
    return DppResult(estimate, se, tol, verdict, oracle)


def constant_control_gap(
    problem: ControlProblem, value, a: float, t0: float, theta: float, mean: float, var: float
) -> float:
    """Exact gap prediction for a constant control via the linear ansatz.

    The policy value under constant a is quadratic in the moments with
    coefficients solving linear backward equations matched to V at theta;
    RK4 with a halving check integrates them.
    """
    consts = problem.constants
    q, r = consts["q"], consts["r"]
    sigma, sigma0 = consts["sigma"], consts["sigma0"]
    qc_end = value.quad_coeffs(theta)
    terminal = np.array([qc_end["P"], qc_end["R"], 0.0, qc_end["c"]])

    def rhs(t, s):
        p, rr, sw, _ = s
        return np.array(
            [0.5 * q, 0.5 * r, -2.0 * a * rr, 0.5 * a * a - a * sw - (p * sigma**2 + rr * sigma0**2)]
        )

    steps = 1024
    _, sol = _rk4_backward(rhs, terminal, theta, t0, steps)
    _, sol2 = _rk4_backward(rhs, terminal, theta, t0, 2 * steps)
    if float(np.max(np.abs(sol2[::2] - sol))) > 1e-9:
        sol = sol2
    p_w, r_w, s_w, c_w = sol[-1]
    qc0 = value.quad_coeffs(t0)
    return float(
        (p_w - qc0["P"]) * var + (r_w - qc0["R"]) * mean**2 + s_w * mean + (c_w - qc0["c"])
    )


# ---------------------------------------------------------------------------
# Lipschitz audit of the generator in the measure argument


@dataclass(frozen=True)
class AuditRow:
    kind: str
    delta: float
    w2: float
    dphi: float
    ratio: float


def lipschitz_audit(
    problem: ControlProblem,
    value,
    t: float = 0.0,
    a0: float = 0.5,
    num_atoms: int = 512,
    deltas: Sequence[float] = (0.4, 0.2, 0.1, 0.05),
) -> dict:
    """Empirical Lipschitz ratios of m -> generator(m) under a fixed control.

    Translation pairs shift every atom by delta; scaling pairs dilate the
    atoms around their mean.  Ratios use the exact transport distance of
    the atom clouds and should stabilize as delta shrinks.
    """
    control = constant_feedback(a0, problem.a_max)
    base_atoms = gaussian_quantile_initial(0.3, 1.0)(None, num_atoms)
    base = EmpiricalMeasure(base_atoms)
    phi0 = generator(problem, value, t, 0.0, base, control)
    rows: list[AuditRow] = []
    for delta in deltas:
        shifted = EmpiricalMeasure(base_atoms + delta)
        w2 = float(np.sqrt(w2_squared(base, shifted)))
        if w2 == 0.0:
            continue
        dphi = abs(generator(problem, value, t, 0.0, shifted, control) - phi0)
        rows.append(AuditRow("translation", delta, w2, dphi, dphi / w2))
    mu = base_atoms.mean()
    for delta in deltas:
        scaled = EmpiricalMeasure(mu + (1.0 + delta) * (base_atoms - mu))
        w2 = float(np.sqrt(w2_squared(base, scaled)))
        if w2 == 0.0:
            continue
        dphi = abs(generator(problem, value, t, 0.0, scaled, control) - phi0)
        rows.append(AuditRow("scaling", delta, w2, dphi, dphi / w2))
    ratios = [r.ratio for r in rows]
    by_kind = {}
    for kind in ("translation", "scaling"):
        ks = [r.ratio for r in rows if r.kind == kind]
        stable = len(ks) >= 2 and abs(ks[-1] - ks[-2]) <= 0.1 * max(abs(ks[-1]), 1e-12)
        by_kind[kind] = {"ratios": ks, "stable": stable}
    return {
        "rows": rows,
        "max_ratio": max(ratios) if ratios else 0.0,
        "kinds": by_kind,
        "finite": all(np.isfinite(ratios)),
    }
