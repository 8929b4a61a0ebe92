"""Exception hierarchy shared by all modules."""


class StructVAEError(Exception):
    """Base class for package errors."""


class ConfigurationError(StructVAEError, ValueError):
    """Inconsistent configuration, e.g. channel count vs. neighbourhood."""


class ShapeError(StructVAEError, ValueError):
    """Array dimensions do not agree."""


class NumericError(StructVAEError, ArithmeticError):
    """Non-finite input or an invariant violation such as a zero diagonal."""


class StageError(StructVAEError, RuntimeError):
    """Model has not reached the training stage an operation needs."""


class DivergenceError(NumericError):
    """Optimisation or training produced NaN/inf.

    ``trace`` holds the objective values recorded before the failure.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class ArtifactError(StructVAEError, OSError):
    """Missing, corrupt or incompatible file (tensor, checkpoint, config)."""
