"""Shared exception types."""


class GfsimError(Exception):
    """Base class for all package errors."""


class DivergentIntegralError(GfsimError):
    """An exponential-moment integral fails its convergence test."""


class QuadratureError(GfsimError):
    """Adaptive quadrature did not reach the requested tolerance.

    Carries the achieved residual estimate in ``residual``.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NoSignChangeError(GfsimError):
    """Root bracketing failed: the function takes no negative value in the bracket."""


class RateOverflowError(GfsimError):
    """Jump rate above the cutoff exceeds the configured budget."""


class EmptySupportError(GfsimError):
    """Jump sampling was requested on a side with no mass above the cutoff."""


class BudgetExceededError(GfsimError):
    """Cell budget exhausted during tree growth.

    ``partial`` holds whatever was built before the overflow, so callers can
    inspect it; nothing is silently dropped.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class ConfigError(GfsimError):
    """Config file could not be parsed or validated."""
