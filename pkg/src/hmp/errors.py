"""Exception types raised across the package."""


class HmpError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(HmpError, ValueError):
    pass


class NonFinite(HmpError, ValueError):
    pass


class DomainError(HmpError, ValueError):
    pass


class AxisOutOfRange(HmpError, IndexError):
    pass


class NotScalar(HmpError, ValueError):
    pass


class TapeConsumed(HmpError, RuntimeError):
    pass


class MissingGradient(HmpError, RuntimeError):
    pass


class EmptyDataset(HmpError, ValueError):
    pass


class EmptyBatch(HmpError, ValueError):
    pass


class BatchTooSmall(HmpError, ValueError):
    pass


class TooFewTokens(HmpError, ValueError):
    pass


class StageMismatch(HmpError, ValueError):
    pass


class DegenerateLabels(HmpError, ValueError):
    pass


class FractionTooSmall(HmpError, ValueError):
    pass


class FormatError(HmpError, ValueError):
    """Malformed file contents. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ChecksumError(FormatError):
    pass


class IoError(HmpError, OSError):
    pass
