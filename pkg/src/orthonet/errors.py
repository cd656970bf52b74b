"""Exception types raised across the toolkit."""


class OrthoNetError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(OrthoNetError, ValueError):
    pass


class DecompositionError(OrthoNetError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class RankError(DecompositionError):
    pass


class ManifoldError(OrthoNetError):
    """A point expected on the Stiefel manifold is not on it."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class RetractionError(ManifoldError):
    pass


class SpecError(OrthoNetError, ValueError):
    """Invalid network layer list."""


class NumericError(OrthoNetError, FloatingPointError):
    pass


class TraceError(OrthoNetError):
    pass


class BatchSizeError(OrthoNetError, ValueError):
    pass


class ParseError(OrthoNetError, ValueError):
    def __init__(self, message, line=None, offset=None):
        if line is not None:
            message = f"line {line}: {message}"
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.line = line
        self.offset = offset


class CheckpointError(OrthoNetError):
    pass


class TrainingDiverged(OrthoNetError):
    pass
