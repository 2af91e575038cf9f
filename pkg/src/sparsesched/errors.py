"""Exception types raised across the package."""


class CompressionError(ValueError):
    """Base class for all errors raised by sparsesched."""


class DimensionError(CompressionError):
    pass


class NotPositiveDefiniteError(CompressionError):
    pass


class SingularHessianError(CompressionError):
    pass


class PivotError(CompressionError):
    """A pivot collapsed to zero (or below) during an elimination step."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class InfeasibleTargetError(CompressionError):
    pass


class ContainerError(CompressionError):
    """Malformed or inconsistent on-disk container."""


class MissingTensorError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass
