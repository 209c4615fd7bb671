"""
Exception types.
Validation errors map to CLI exit code 1, numerical failures to exit code 2.
"""


class PolHeightError(Exception):
    """Base class for toolkit errors."""
    exit_code = 2


class ValidationError(PolHeightError, ValueError):
    """Bad input, configuration or precondition."""
    exit_code = 1


class NumericalError(PolHeightError, ArithmeticError):
    """The numerics failed on otherwise valid input."""
    exit_code = 2


class DomainError(ValidationError):
    """Argument outside the domain of an optical relation."""


class DegenerateFitError(ValidationError):
    """Polariser schedule cannot determine the sinusoid."""


class ConfigurationError(ValidationError):
    """Inconsistent lighting or variant configuration."""


class CoplanarityError(ConfigurationError):
    """Lights and viewer are coplanar."""


class SingularSystemError(NumericalError):
    """Least-squares system lacks rank M-1."""


class ConvergenceError(NumericalError):
    """Iteration cap reached without convergence."""
