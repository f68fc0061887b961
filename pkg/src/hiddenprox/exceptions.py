"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`ProxiError`
so callers (the CLI in particular) can separate numerical/estimation failures
from programming errors.
"""


class ProxiError(Exception):
    """Base class for all package errors."""


class ConfigError(ProxiError):
    """Invalid or missing configuration."""


class EmptySampleError(ProxiError, ValueError):
    pass


class UnsupportedKindError(ProxiError, ValueError):
    pass


class InsufficientDataError(ProxiError, ValueError):
    pass


class DegenerateTensorError(ProxiError):
    pass


class EigenSeparationError(ProxiError):
    """Eigenvalues of the slice ratio are complex or coincide, so the
    latent classes cannot be separated in this sample."""


class LabelAmbiguityError(ProxiError):
    pass


class ConvergenceError(ProxiError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class DegenerateComponentError(ProxiError):
    pass


class OptimizationError(ProxiError):
    def __init__(self, message, grad_norm=None):
        super().__init__(message)
        self.grad_norm = grad_norm


class PositivityError(ProxiError, ValueError):
    pass


class BasisConstructionError(ProxiError):
    pass


class NonDegeneracyError(ProxiError):
    pass


class WeightDegeneracyError(ProxiError):
    pass


class MisspecificationError(ProxiError, ValueError):
    pass


class EstimationError(ProxiError):
    pass


class StudyError(ProxiError):
    pass

__all__ = [
    "ProxiError",
    "ConfigError",
    "EmptySampleError",
    "UnsupportedKindError",
    "InsufficientDataError",
    "DegenerateTensorError",
    "EigenSeparationError",
    "LabelAmbiguityError",
    "ConvergenceError",
    "DegenerateComponentError",
    "OptimizationError",
    "PositivityError",
    "BasisConstructionError",
    "NonDegeneracyError",
    "WeightDegeneracyError",
    "MisspecificationError",
    "EstimationError",
    "StudyError",
]
