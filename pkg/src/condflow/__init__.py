"""Numerical verification of chain rules for flows of conditional laws.

Simulates common-noise interacting particle systems, evaluates exact
derivative calculus for cylindrical functionals of the empirical law,
and checks the resulting chain-rule identities and the linear-quadratic
mean-field dynamic-programming equation to statistical and
discretization tolerance.
"""

__version__ = "0.1.0"

from .chainrule import (
    BrownianFieldSpec,
    EnsembleSpec,
    FactorFunctional,
    FieldComponent,
    RandomFieldSpec,
    VerificationReport,
    VerifyConfig,
    build_random_field,
    convergence_sweep,
    verify_brownian_corollary,
    verify_factor_model,
    verify_ito,
    verify_ito_wentzell,
)
from .errors import (
    BlowUpError,
    InvalidArgumentError,
    NumericOverflowError,
    UnsupportedError,
)
from .measures import (
    CylindricalFunctional,
    EmpiricalMeasure,
    MeasurePair,
    OuterFunction,
    TestFunction,
    d2x_dm,
    d_lions,
    delta_m,
    dm2,
    dm2_cross,
    empirical,
    evaluate,
    fd_check_dm,
    fd_check_dm2,
    integral_identity_gap,
    linear_combination,
    w2_squared,
)
from .particle import (
    ConditionalEstimate,
    ParticleEnsemble,
    cond_expect,
    cond_expect_pair,
    dirac_initial,
    gaussian_quantile_initial,
    measure_flow_modulus,
    pair_product_expect,
    simulate_ensemble,
)
from .paths import (
    Partition,
    RngStream,
    SamplePath,
    SdeCoefficients,
    constant_coefficients,
    make_uniform_partition,
    simulate_brownian,
    simulate_factor,
)
from .quadvar import (
    IncrementTable,
    WeightProcess,
    constant_weight,
    increments,
    lemma_convergence_study,
    realized_qv,
    sampled_weight,
    total_variation,
    weighted_qv_sum,
)
from .registry import get_experiment, get_functional, list_registry
