"""Exception hierarchy shared by every module."""


class GradLeakError(Exception):
    """Base class for all package errors."""


class DimensionError(GradLeakError, ValueError):
    """Operands have incompatible shapes."""


class ContractError(GradLeakError, ValueError):
    """An input violates a documented precondition."""


class DegenerateGradientError(GradLeakError, ArithmeticError):
    """A gradient with zero norm was used where a direction is required."""


class AttackFailedError(GradLeakError, RuntimeError):
    """Every restart of a gradient inversion run failed."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class InsufficientDataError(GradLeakError, ValueError):
    """Too few usable rows to compute a correlation."""


class ParseError(GradLeakError, ValueError):
    """Malformed binary or text input.

    ``offset`` is the byte offset (binary formats) or line number (text)
    at which the problem was detected.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(GradLeakError, ValueError):
    """Invalid or unknown configuration key/value."""
