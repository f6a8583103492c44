"""Moment-based uncertainty propagation and filtering for single-mode
stochastic hybrid systems, with maximum-entropy belief reconstruction and
a Monte Carlo oracle."""

from .errors import (
    ClosureViolationError,
    ConfigError,
    DegenerateUpdateError,
    DimensionMismatchError,
    IntegrationError,
    NonRealizableError,
    SchemaError,
    ShsError,
)
from .filtering import (
    FilterConfig,
    FilterRun,
    MapEstimate,
    MeasurementModel,
    MeasurementRecord,
    fit_residual_med,
    induced_likelihood_coeffs,
    map_estimate,
    moment_update,
    position_measurement_model,
    posterior_refit,
    residual_noise_moments,
    run_filter,
)
from .maxent import (
    FitReport,
    MedParams,
    fit_med,
    log_partition,
    med_density,
    med_density_grad,
    med_from_exponent,
    med_from_record,
    med_moments,
    med_to_record,
    potential,
    potential_grad,
    potential_hess,
    reference_rule,
)
from .mcref import (
    EnsembleMoments,
    McConfig,
    McPath,
    RolloutError,
    ensemble_moments,
    normalized_rollout_error,
    rollout_rmse,
    simulate_path,
    trajectory_generator,
)
from .model import (
    BouncingBallParams,
    BoxDomain,
    GuardFacet,
    ShsModel,
    bouncing_ball_model,
    diffusion_matrix,
    generator_apply,
    reset_jump_polynomial,
)
from .polyalg import (
    MomentVector,
    MultiIndex,
    Polynomial,
    enumerate_multiindices,
    format_polynomial,
    gaussian_moments_1d,
    gaussian_product_moments,
    parse_polynomial,
    poly_affine_substitute,
    poly_diff,
    poly_eval,
    poly_eval_many,
    poly_mul,
)
from .propagate import (
    FluxEvaluator,
    GeneratorTable,
    MomentStepper,
    MomentTrajectory,
    boundary_flux,
    build_generator_table,
    moment_rhs,
    propagate,
)
from .quad import QuadratureRule, gauss_legendre_nodes, guard_rule, integrate, tensor_rule

__version__ = "0.1.0"
