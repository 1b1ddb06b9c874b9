"""Exception hierarchy shared across the package."""


class MFNError(Exception):
    """Base class for all package errors."""


class ShapeError(MFNError, ValueError):
    pass


class DimensionError(ShapeError):
    """Degenerate or overflowing tensor dimensions."""


class StateError(MFNError, RuntimeError):
    """An operation was called out of order, e.g. backward before forward."""


class StatisticsError(MFNError, ValueError):
    pass


class NumericError(MFNError, ArithmeticError):
    pass


class DataError(MFNError, ValueError):
    pass


class ArgumentError(MFNError, ValueError):
    pass


class FormatError(MFNError, ValueError):
    """Malformed binary file; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(FormatError):
    pass


class ConfigError(MFNError, ValueError):
    pass
