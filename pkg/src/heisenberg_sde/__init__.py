"""Hypoelliptic diffusions on generalized Heisenberg groups with singular drifts."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .estimators import EstimatorResult
from .group import (
    GroupStructure,
    HReport,
    apply_generator,
    build_group,
    check_hypothesis_H,
    group_from_config,
    group_inv,
    group_mul,
    kohn_laplacian_group,
    star_group,
    sigma_at,
)
from .paths import (
    BrownianGrid,
    ReferencePath,
    reference_flow,
    refine_brownian,
    sample_brownian,
    semigroup_estimate,
)
from .bismut import (
    CameronMartinDirection,
    bismut_gradient,
    compute_M,
    compute_Q,
    gradient_fd_oracle,
    malliavin_derivative,
    second_gradient,
)
from .drifts import DriftSpec, bump_drift, constant_drift, drift_from_config, radial_singular_drift, zero_drift
from .lattice import SpaceLattice
from .norms import check_Hstar, check_KK1, frac_laplacian_y, hy_norm, lqp_norm
from .girsanov import (
    exp_moment_khasminskii,
    girsanov_weight,
    krylov_estimate,
    weak_expectation,
)
from .zvonkin import (
    MildSolutionGrid,
    ResolventGrid,
    ZvonkinMap,
    apply_q_lambda,
    build_zvonkin_map,
    picard_solve_xi,
    transformed_residual,
)
from .singular import (
    SdePath,
    euler_maruyama_singular,
    pathwise_uniqueness_experiment,
    weak_strong_compare,
)
from .config import load_config
from .experiments import run_experiment
