"""Exception types shared across the package."""


class HierattError(Exception):
    """Base class for all package errors."""


class ShapeError(HierattError, ValueError):
    """Operand dims are incompatible with the operation's contract."""


class ConfigError(HierattError, ValueError):
    """A configuration value is out of range or inconsistent."""


class GraphError(HierattError, RuntimeError):
    """Autodiff graph misuse, e.g. running backward twice."""


class NumericsError(HierattError, ArithmeticError):
    """Non-finite values detected while debug checks are enabled."""


class ParseError(HierattError, ValueError):
    """Malformed serialized input. Carries a byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
