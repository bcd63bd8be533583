import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings
from hypothesis import strategies as st

from condflow import (
    BlowUpError,
    InvalidArgumentError,
    RngStream,
    cond_expect,
    cond_expect_pair,
    constant_coefficients,
    dirac_initial,
    empirical,
    gaussian_quantile_initial,
    make_uniform_partition,
    measure_flow_modulus,
    pair_product_expect,
    simulate_ensemble,
)
from condflow.paths import SdeCoefficients


def build(coeffs, initial, n_particles=32, n_cells=16, seed=0, horizon=1.0, control=None):
    part = make_uniform_partition(horizon, n_cells)
    return simulate_ensemble(coeffs, initial, n_particles, part, RngStream(seed, 0), control=control)


def test_frozen_dynamics():
    atoms = np.array([0.0, 1.0, -2.0, 0.5])
    ens = build(constant_coefficients(), empirical(atoms), n_particles=4)
    np.testing.assert_array_equal(ens.states, np.tile(atoms, (17, 1)))


def test_pure_common_noise_moving_dirac():
    ens = build(constant_coefficients(sigma0=1.0), dirac_initial(0.7), n_particles=8)
    expected = 0.7 + ens.common.values
    for i in range(8):
        np.testing.assert_array_equal(ens.states[:, i], expected)
    # conditional expectation of the terminal value is exact with zero stderr
    est = cond_expect(ens, lambda path: path.values[-1])
    assert est.value == pytest.approx(0.7 + ens.common.values[-1])
    assert est.stderr == 0.0


def test_idio_noise_empirical_variance():
    reps = 48
    vals = np.empty(reps)
    part = make_uniform_partition(1.0, 16)
    for r in range(reps):
        ens = simulate_ensemble(
            constant_coefficients(sigma=1.0), dirac_initial(0.0), 256, part, RngStream(5, 0).child(r)
        )
        vals[r] = ens.states[-1].var()
    se = vals.std(ddof=1) / np.sqrt(reps)
    assert abs(vals.mean() - 1.0) < 3.0 * se


def test_cond_expect_constant_statistic():
    ens = build(constant_coefficients(sigma=1.0), dirac_initial(0.0))
    est = cond_expect(ens, lambda path: 3.25)
    assert est.value == 3.25
    assert est.stderr == 0.0


def test_cond_expect_clt_scale():
    ens = build(constant_coefficients(sigma=1.0), dirac_initial(0.2), n_particles=512, seed=9)
    est = cond_expect(ens, lambda path: path.values[-1])
    assert abs(est.value - 0.2) < 3.0 / np.sqrt(512)
    assert est.stderr > 0


def test_pair_statistic_constant():
    ens = build(constant_coefficients(sigma=1.0), dirac_initial(0.0), n_particles=8)
    est = cond_expect_pair(ens, lambda a, b: 1.0)
    assert est.value == 1.0
    assert est.stderr == 0.0


def test_pair_product_identity_vs_double_loop():
    ens = build(constant_coefficients(sigma=1.0), dirac_initial(0.0), n_particles=12, seed=3)
    f = ens.states[-1]
    g = ens.states[-1] ** 2
    direct = cond_expect_pair(ens, lambda a, b: a.values[-1] * b.values[-1] ** 2)
    fast = pair_product_expect(ens, f, g)
    assert fast.value == pytest.approx(direct.value, rel=1e-12)
    assert fast.stderr == pytest.approx(direct.stderr, rel=1e-9)


def test_pair_product_independence_centered():
    ens = build(constant_coefficients(sigma=1.0), dirac_initial(0.0), n_particles=512, seed=21)
    term = ens.states[-1]
    est = pair_product_expect(ens, term, term)
    assert abs(est.value) < 3.0 * est.stderr + 1e-3


def test_pair_product_identical_particles():
    ens = build(constant_coefficients(sigma0=1.0), dirac_initial(0.0), n_particles=16)
    w0_t = ens.common.values[-1]
    est = pair_product_expect(ens, ens.states[-1], ens.states[-1])
    assert est.value == pytest.approx(w0_t**2)
    assert est.stderr == pytest.approx(0.0, abs=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_exchangeability(seed):
    ens = build(
        constant_coefficients(sigma=0.8, sigma0=0.5), gaussian_quantile_initial(0.1, 0.4),
        n_particles=16, n_cells=8, seed=seed,
    )
    perm = np.random.default_rng(seed).permutation(16)
    permuted = replace(
        ens,
        states=ens.states[:, perm],
        idio_increments=ens.idio_increments[:, perm],
        drift_values=ens.drift_values[:, perm],
        sigma_values=ens.sigma_values[:, perm],
        sigma0_values=ens.sigma0_values[:, perm],
    )
    est = cond_expect(ens, lambda p: p.values[-1] ** 2)
    est_p = cond_expect(permuted, lambda p: p.values[-1] ** 2)
    assert est.value == pytest.approx(est_p.value, rel=1e-12)
    pair = pair_product_expect(ens, ens.states[-1], ens.states[-1])
    pair_p = pair_product_expect(permuted, permuted.states[-1], permuted.states[-1])
    assert pair.value == pytest.approx(pair_p.value, rel=1e-12)


def test_mckean_vlasov_coupling_sees_running_mean():
    # drift pulls every particle toward the running empirical mean; with a
    # Dirac start and no noise everything stays put
    coeffs = SdeCoefficients(
        drift=lambda t, x, y, m, a: m.mean() - x,
        sigma=lambda t, x, y, m, a: np.zeros_like(x),
        sigma0=lambda t, x, y, m, a: np.zeros_like(x),
        k=lambda t, y: 0.0,
        gamma=lambda t, y: 0.0,
        gamma0=lambda t, y: 0.0,
    )
    ens = build(coeffs, empirical(np.array([1.0, -1.0])), n_particles=2, n_cells=4)
    np.testing.assert_allclose(ens.states[-1].mean(), 0.0, atol=1e-12)
    assert ens.states[-1, 0] < 1.0  # contraction toward the mean


def test_blow_up_names_step():
    coeffs = SdeCoefficients(
        drift=lambda t, x, y, m, a: x * 1e160,
        sigma=lambda t, x, y, m, a: np.zeros_like(x),
        sigma0=lambda t, x, y, m, a: np.zeros_like(x),
        k=lambda t, y: 0.0,
        gamma=lambda t, y: 0.0,
        gamma0=lambda t, y: 0.0,
    )
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(BlowUpError) as err:
            build(coeffs, dirac_initial(1.0), n_particles=4, n_cells=8)
    assert err.value.step >= 1


def test_invalid_particle_counts_and_initials():
    part = make_uniform_partition(1.0, 4)
    with pytest.raises(InvalidArgumentError):
        simulate_ensemble(constant_coefficients(), dirac_initial(0.0), 1, part, RngStream(0, 0))
    with pytest.raises(InvalidArgumentError):
        simulate_ensemble(constant_coefficients(), empirical([0.0, 1.0, 2.0]), 4, part, RngStream(0, 0))
    # single-atom measures tile; exact-count measures pass through
    ens = simulate_ensemble(constant_coefficients(), empirical([1.5]), 4, part, RngStream(0, 0))
    np.testing.assert_array_equal(ens.states[0], np.full(4, 1.5))


def test_particle_path_decomposition():
    ens = build(constant_coefficients(b=0.5, sigma=0.3), dirac_initial(0.1), n_particles=4)
    path = ens.particle_path(2)
    fv, mart = path.decomposition
    np.testing.assert_allclose(fv[-1], 0.5, atol=1e-12)
    np.testing.assert_allclose(path.values[0] + fv + mart, path.values, rtol=0, atol=1e-13)


def test_modulus_frozen_and_translation():
    ens = build(constant_coefficients(), dirac_initial(0.0), n_cells=8)
    res = measure_flow_modulus(ens, 0.25, 0.75)
    assert res.estimate == 0.0
    assert res.passed

    ens = build(constant_coefficients(b=1.0), dirac_initial(0.0), n_cells=8)
    res = measure_flow_modulus(ens, 0.25, 0.75)
    assert res.estimate == pytest.approx(0.5, abs=1e-12)
    assert res.bound == pytest.approx(0.5)


def test_modulus_diffusive_within_bound():
    part = make_uniform_partition(1.0, 32)
    coeffs = constant_coefficients(sigma=1.0)
    ensembles = [
        simulate_ensemble(coeffs, dirac_initial(0.0), 128, part, RngStream(8, 0).child(r))
        for r in range(16)
    ]
    res = measure_flow_modulus(ensembles, 0.25, 0.75)
    assert res.passed
    assert res.bound == pytest.approx(np.sqrt(0.5))
    with pytest.raises(InvalidArgumentError):
        measure_flow_modulus(ensembles, 0.75, 0.25)


def test_chaos_rate_against_refined_reference():
    # deviation of the conditional-mean estimator from an 8N reference
    # shrinks like N^(-1/2) in the particle count
    coeffs = SdeCoefficients(
        drift=lambda t, x, y, m, a: 0.5 * (m.mean() - x),
        sigma=lambda t, x, y, m, a: np.full_like(x, 1.0),
        sigma0=lambda t, x, y, m, a: np.full_like(x, 0.5),
        k=lambda t, y: 0.0,
        gamma=lambda t, y: 0.0,
        gamma0=lambda t, y: 0.0,
    )
    part = make_uniform_partition(1.0, 16)
    sizes = [32, 128, 512]
    reps = 160
    base = RngStream(77, 0)
    devs = []
    for n in sizes:
        gaps = np.empty(reps)
        for r in range(reps):
            # same stream -> same common-noise path; the estimator is
            # conditional on it, so the reference must share it
            small = simulate_ensemble(coeffs, dirac_initial(0.0), n, part, base.child(n, r))
            big = simulate_ensemble(coeffs, dirac_initial(0.0), 8 * n, part, base.child(n, r))
            gaps[r] = abs(small.states[-1].mean() - big.states[-1].mean())
        devs.append(gaps.mean())
    slope = np.polyfit(np.log(sizes), np.log(devs), 1)[0]
    assert -0.7 <= slope <= -0.3
