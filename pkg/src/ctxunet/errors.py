"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes violate an operation's contract."""


class ContractError(ValueError):
    """A precondition other than a shape constraint was violated."""


class ConfigError(ValueError):
    """Invalid configuration (bad field value, missing file, bad topology)."""


class DataError(ValueError):
    """Input data violates its contract (bad label, out-of-bounds dot, ...)."""


class FormatError(ValueError):
    """Malformed checkpoint file. Carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(RuntimeError):
    """Non-finite values encountered where finite ones are required."""
