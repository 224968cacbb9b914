"""Structured exceptions shared across the package."""


class CrossFpnError(Exception):
    """Base class for all library errors."""


class ShapeMismatchError(CrossFpnError, ValueError):
    """Two tensors disagree on a dimension contract."""

    def __init__(self, message, expected=None, got=None):
        if expected is not None or got is not None:
            message = f"{message} (expected {expected}, got {got})"
        super().__init__(message)
        self.expected = expected
        self.got = got


class DivisibilityError(CrossFpnError, ValueError):
    """A spatial size is not divisible by the required factor."""

    def __init__(self, message, size=None, divisor=None):
        if size is not None and divisor is not None:
            message = f"{message}: {size} is not divisible by {divisor}"
        super().__init__(message)
        self.size = size
        self.divisor = divisor


class NumericError(CrossFpnError, ArithmeticError):
    """A forward or backward pass produced non-finite values."""


class DecodeError(CrossFpnError, ValueError):
    """Malformed netpbm input; reports the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(CrossFpnError, ValueError):
    """Invalid run configuration; carries the offending field name."""

    def __init__(self, message, field=None):
        if field is not None:
            message = f"config field '{field}': {message}"
        super().__init__(message)
        self.field = field


class TrainingDivergedError(NumericError):
    """Training hit a non-finite loss."""

    def __init__(self, step, loss):
        super().__init__(f"non-finite joint loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
