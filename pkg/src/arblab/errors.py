"""Exception hierarchy shared across the package.

Two broad classes matter for the CLI exit-code mapping: input/validation
failures (exit code 2) and numerical failures such as stability or overflow
(exit code 3).  I/O problems surface as ordinary ``OSError`` (exit code 4).
"""


class ArblabError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(ArblabError):
    """Bad inputs detected before any computation runs (CLI exit code 2)."""


class NumericalError(ArblabError):
    """Computation started but failed numerically (CLI exit code 3)."""


class NonPositiveState(ValidationError):
    """A state vector left the open positive orthant where it was required."""


class SimplexViolation(ValidationError):
    """A weight vector is not strictly inside the unit simplex."""


class ConfigInvalid(ValidationError):
    """A simulation/run configuration violates its invariants."""


class ParamInvalid(ValidationError):
    """A portfolio or operation parameter is out of range."""


class ModelValidationError(ValidationError):
    """Model coefficients violate a structural requirement (e.g. k < 0)."""


class ExtensionUnavailable(ValidationError):
    """Model coefficients do not extend continuously to the orthant boundary."""


class UnsupportedDimension(ValidationError):
    """The requested operation is not implemented for this dimension."""


class DomainError(ValidationError):
    """A query point lies outside the solved space-time box."""


class SingularVolatility(NumericalError):
    """The volatility matrix failed the scale-free determinant floor."""


class StabilityViolation(NumericalError):
    """The explicit time-step certificate cannot be satisfied."""


class OverflowGuard(NumericalError):
    """A per-path functional exceeded the overflow guard (1e300)."""


class WealthNonPositive(NumericalError):
    """Discretized wealth crossed zero during a backtest."""
