"""Latent basis growth models with individual measurement occasions."""
from .data import (
    DataError,
    Individual,
    LongitudinalSample,
    OutcomeSeries,
    Violation,
    load_long_csv,
    make_sample,
    validate,
    write_long_csv,
)
from .derived import (
    Estimate,
    absolute_rate_moments,
    change_from_baseline,
    derived_report,
    standardized_correlations,
)
from .estimator import (
    EstimationError,
    FitOptions,
    FitResult,
    FitStatus,
    NotPositiveDefiniteError,
    fiml_deviance,
    fit,
    numeric_gradient,
    numeric_hessian,
    starting_values,
    wald_ci,
)
from .model import (
    CrossParams,
    ModelSpec,
    OutcomeModelSpec,
    OutcomeParams,
    ParameterSet,
    build_loading_matrix,
    implied_moments,
    rescale_parameters,
)
from .simstudy import (
    MetricReport,
    OutcomeDesign,
    SimulationDesign,
    coverage,
    empirical_se,
    generate_dataset,
    relative_bias,
    relative_rmse,
    run_study,
    benchmark_design,
)

__version__ = "0.1.0"
