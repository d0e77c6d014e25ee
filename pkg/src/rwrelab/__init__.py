"""Simulation and estimation laboratory for nearest-neighbor random walks in
uniformly elliptic random environments with controllable disorder and
finite-range dependence."""

from .environment import (
    Direction,
    EnvLaw,
    Environment,
    MixingSpec,
    SiteKernel,
    directions,
    direction_vectors,
    disorder_of,
    environment_from_csv,
    environment_to_csv,
    imbalance_of,
    law_from_config,
    law_to_config,
    make_iid_law,
    make_mixing_law,
    sample_environment,
    site_kernels,
    validate_environment,
)
from .errors import (
    BadMixingRange,
    DegenerateDenominator,
    EmptyRun,
    EnumerationTooLarge,
    InfeasibleDisorder,
    InvalidCoupling,
    KappaOutOfRange,
    ResidualNegative,
    RwreError,
    UngatedRun,
    UnsupportedLaw,
    WindowExhausted,
    ZNotInterior,
)
from .mgf import (
    ConjugateGrid,
    directed_log_mgf,
    directed_log_mgf_annealed,
    gradient_sandwich_check,
    lattice_log_mgf,
    lattice_log_mgf_annealed,
    legendre_transform,
    mean_step_transform,
    velocity_from_transverse,
    zero_velocity_rate,
)
from .pathspace import (
    annealed_endpoint_distribution,
    annealed_hit_probability,
    conditional_step_kernel,
    hitting_counts,
    path_from_steps,
    path_weight_exact,
    path_weight_mc,
    quenched_path_prob,
)
from .rate import (
    RateEstimate,
    ReachCost,
    check_reach_cost_laws,
    estimate_quenched_rate,
    log_hit_series,
    reach_cost,
    reach_cost_from_series,
    velocity_target,
)
from .tilting import (
    EpsSequence,
    RenewalRatios,
    RenewalRecord,
    TiltedKernel,
    build_tilt,
    coupling_marginal_gap,
    detect_renewals,
    exit_probability,
    exit_probability_mc,
    rate_transfer_check,
    renewal_ratio_samples,
    residual_kernel,
    sample_coupling_tags,
    scaffold_scan,
    simulate_coupled,
    simulate_tilted,
    solve_tilt_scale,
    tilt_identity_check,
    tilted_mgf_hessian,
    tilted_mgf_identity_check,
)
from .walk import (
    ProjectedTrajectory,
    Trajectory,
    in_cone,
    position_from_level,
    project_steps,
    simulate_annealed,
    simulate_annealed_batch,
    simulate_quenched,
    simulate_quenched_batch,
    steps_directed,
)

__version__ = "0.1.0"
