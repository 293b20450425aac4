"""Calibration of computer-model parameters with projected kernels and an
adaptive l1 penalty toward engineering design values."""
from .data import ComputerDataset, PhysicalDataset
from .errors import (
    CalibrationError,
    ConvergenceError,
    DegenerateModelError,
    ExtrapolationError,
    InsufficientDataError,
    NumericalError,
    RegularizationError,
    SchemaError,
    SingularProjectionError,
    StudyError,
    SurrogateFitError,
    ValidationError,
)
from .estimators import (
    CalibrationProblem,
    CalibrationResult,
    build_problem,
    compute_adaptive_weights,
    empirical_model_loss,
    output_weights,
    solve_ols,
    solve_pk,
    solve_po,
)
from .kernels import (
    DomainBounds,
    KernelConfig,
    ProjectedKernelMatrix,
    gaussian_kernel,
    gaussian_kernel_matrix,
    project_kernel,
    quadratic_form,
)
from .selection import (
    LambdaPath,
    PathPoint,
    SobolIndices,
    VariableClassification,
    bic,
    classify_variables,
    compute_path,
    default_lambda_grid,
    sobol_total_indices,
)
from .surrogate import (
    GpHyperParams,
    LinearSurrogate,
    estimate_gp_params,
    estimate_hyperparams,
    fit_gp,
    fit_parametric,
    fit_slope_model,
    maximin_lhs,
)

__version__ = "0.1.0"

__all__ = [
    "ComputerDataset",
    "PhysicalDataset",
    "CalibrationError",
    "ConvergenceError",
    "DegenerateModelError",
    "ExtrapolationError",
    "InsufficientDataError",
    "NumericalError",
    "RegularizationError",
    "SchemaError",
    "SingularProjectionError",
    "StudyError",
    "SurrogateFitError",
    "ValidationError",
    "CalibrationProblem",
    "CalibrationResult",
    "build_problem",
    "compute_adaptive_weights",
    "empirical_model_loss",
    "output_weights",
    "solve_ols",
    "solve_pk",
    "solve_po",
    "DomainBounds",
    "KernelConfig",
    "ProjectedKernelMatrix",
    "gaussian_kernel",
    "gaussian_kernel_matrix",
    "project_kernel",
    "quadratic_form",
    "LambdaPath",
    "PathPoint",
    "SobolIndices",
    "VariableClassification",
    "bic",
    "classify_variables",
    "compute_path",
    "default_lambda_grid",
    "sobol_total_indices",
    "GpHyperParams",
    "LinearSurrogate",
    "estimate_gp_params",
    "estimate_hyperparams",
    "fit_gp",
    "fit_parametric",
    "fit_slope_model",
    "maximin_lhs",
]
