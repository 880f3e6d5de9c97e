"""Exception types raised across the package."""


class FlowError(Exception):
    """Base class for all errors raised by flowdet."""


class SingularMatrixError(FlowError, ArithmeticError):
    """A pivot fell below the singularity threshold."""


class NonInvertibleParams(SingularMatrixError):
    """A layer's parameters do not define an invertible map."""


class OutOfDomain(FlowError, ValueError):
    """An inverse was requested outside the range of the forward map."""


class OutOfSupport(FlowError, ValueError):
    """A latent fell outside the support of the base distribution."""


class NotOrthogonal(FlowError, ValueError):
    pass


class DegenerateData(FlowError, ValueError):
    pass


class BadBeta(FlowError, ValueError):
    pass


class BadSplit(FlowError, ValueError):
    pass


class UnknownDataset(FlowError, KeyError):
    pass


class EmptyTrace(FlowError, ValueError):
    pass


class NoRootInBin(FlowError, ArithmeticError):
    """Spline inversion failed; only possible with corrupted knots."""


class ConfigError(FlowError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NoConvergenceWarning(RuntimeWarning):
    """An iterative routine hit its iteration cap before reaching tolerance."""


class ValueOutOfRange(FlowError, ValueError):
    """Quantized input outside ``[0, 2**bits)``."""
