"""Robust smooth-threshold GEE for marginal longitudinal models.

Simultaneous variable selection and coefficient estimation with bounded
score kernels, leverage downweighting, a robust unstructured working
correlation, two-level tuning, and a Monte Carlo benchmarking harness.
"""

from .dataset import LongitudinalDataset, from_subject_arrays
from .exceptions import (
    DataFormatError,
    DegenerateScaleError,
    EstimationError,
    RtgeeError,
)
from .leverage_weights import (
    LeverageConfig,
    RobustLocationScale,
    chi_square_quantile,
    leverage_weight,
    robust_location_scale,
    row_weights,
)
from .residuals_scale import MarginalModel, ResidualSet, mad_phi, pearson_residuals
from .score_kernels import (
    GaussianMoments,
    ScoreFunction,
    candidate_b_grid,
    gaussian_moments,
    psi,
    psi_prime,
    tukey_constant_for_efficiency,
    tukey_efficiency,
)
from .simulation import (
    CASES,
    Contamination,
    MethodSpec,
    SimMetrics,
    SimScenario,
    contaminate,
    design_diverging_p,
    design_large_p,
    design_small_p,
    diverging_dims,
    gen_covariates,
    gen_errors,
    make_replicate,
    method_rsgee,
    method_rtgee,
    method_sgee,
    run_cell,
    run_replicate,
)
from .st_solver import (
    EEComponents,
    FitConfig,
    FitResult,
    assemble_components,
    compute_delta,
    initial_estimate,
    sandwich_covariance,
    solve,
)
from .tuning import (
    TuningResult,
    default_lambda_grid,
    rpwd,
    select_b,
    select_lambda,
    tune,
)
from .working_correlation import (
    CorrelationModel,
    build_R_i,
    ensure_positive_definite,
    estimate_ar1,
    estimate_exchangeable,
    estimate_unstructured,
    robust_residual_transform,
)
from .cli_io import (
    AnalysisReport,
    CrossValidationResult,
    load_dataset,
    mse_cv,
    scenario_from_dict,
    write_dataset,
)

__version__ = "0.1.0"
