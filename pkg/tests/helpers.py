"""Shared independent oracles for the test suite.

Everything here is deliberately brute force and kept independent of the
library code paths it checks.
"""

from itertools import permutations

import numpy as np


def w2_squared_bruteforce(x: np.ndarray, y: np.ndarray) -> float:
    """Exact squared transport cost by enumerating permutation couplings."""
    x = np.atleast_2d(np.asarray(x, dtype=float).T).T
    y = np.atleast_2d(np.asarray(y, dtype=float).T).T
    n = x.shape[0]
    best = np.inf
    for perm in permutations(range(n)):
        cost = float(np.sum((x - y[list(perm)]) ** 2) / n)
        best = min(best, cost)
    return best


def w2_squared_replicated(x: np.ndarray, y: np.ndarray) -> float:
    """1-d cost via lowest-common-multiple atom replication (uniform weights)."""
    n, m = len(x), len(y)
    lcm = np.lcm(n, m)
    xs = np.sort(np.repeat(np.sort(x), lcm // n))
    ys = np.sort(np.repeat(np.sort(y), lcm // m))
    return float(np.mean((xs - ys) ** 2))


def riccati_closed_form(q: float, terminal: float, horizon: float, ts: np.ndarray) -> np.ndarray:
    """tanh solution of dP/dt = q/2 - 2 P^2 with P(horizon) = terminal.

    Valid for |2 terminal / sqrt(q)| < 1 (the regime of the test instances).
    """
    root = 0.5 * np.sqrt(q)
    theta_t = np.arctanh(2.0 * terminal / np.sqrt(q))
    return root * np.tanh(np.sqrt(q) * (np.asarray(ts) - horizon) + theta_t)


def constant_gap_closed_form(
    q: float,
    r: float,
    c_g: float,
    c_m: float,
    sigma: float,
    sigma0: float,
    a: float,
    tau: float,
):
    """Hand-integrated linear-ansatz coefficients for a constant control on
    the final stretch of length tau (terminal condition = terminal reward)."""
    p_w = -0.5 * c_g - 0.5 * q * tau
    r_w = -0.5 * c_m - 0.5 * r * tau
    s_w = -a * (c_m * tau + 0.5 * r * tau**2)
    c_w = (
        -0.5 * a**2 * tau
        - a**2 * (0.5 * c_m * tau**2 + r * tau**3 / 6.0)
        - sigma**2 * (0.5 * c_g * tau + 0.25 * q * tau**2)
        - sigma0**2 * (0.5 * c_m * tau + 0.25 * r * tau**2)
    )
    return p_w, r_w, s_w, c_w
