"""Exception hierarchy.

Every error raised on purpose by the package derives from ``CalibrationError``.
``ValidationError`` covers bad user input (CLI exit code 1); the rest are
numerical failures (CLI exit code 2).
"""


class CalibrationError(Exception):
    """Base class for all package errors."""


class ValidationError(CalibrationError, ValueError):
    """Malformed or inconsistent input (shapes, bounds, files)."""


class SchemaError(ValidationError):
    """CSV file does not follow the expected column layout."""


class ExtrapolationError(ValidationError):
    """Interpolation target lies outside the measured range."""


class NumericalError(CalibrationError, ArithmeticError):
    """Base class for numerical failures."""


class SingularProjectionError(NumericalError):
    """The gradient Gram matrix H is (nearly) singular.

    ``components`` holds the indices of the gradient components that take
    part in the near-dependency.
    """

    def __init__(self, message, components=()):
        super().__init__(message)
        self.components = tuple(components)


class RegularizationError(NumericalError):
    """Projected kernel matrix is singular and no nugget was given."""


class SurrogateFitError(NumericalError):
    """Surrogate regression is rank deficient or ill-conditioned."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class InsufficientDataError(ValidationError):
    """Too few observations for the requested estimate."""


class ConvergenceError(NumericalError):
    """Iterative solver hit its iteration cap."""

    def __init__(self, message, duality_gap=float("nan"), kkt_violation=float("nan")):
        super().__init__(message)
        self.duality_gap = duality_gap
        self.kkt_violation = kkt_violation


class DegenerateModelError(NumericalError):
    """Model output has zero variance, so sensitivity indices are undefined."""


class StudyError(CalibrationError):
    """Too many replicate failures in a Monte-Carlo study."""
