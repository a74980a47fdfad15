"""Exception types shared across the package."""


class CCANError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CCANError):
    """Tensor extents are incompatible with the requested operation."""


class ConfigError(CCANError):
    """A configuration value (or combination) is invalid."""


class DataError(CCANError):
    """Input data violates a documented precondition."""


class FormatError(CCANError):
    """A serialized file is malformed. Carries the byte offset of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UsageError(CCANError):
    """An API was called in an unsupported way."""


class MetricError(CCANError):
    """A metric is undefined for the given inputs."""


class NumericError(CCANError):
    """Numeric values are outside the domain an operation can handle."""
