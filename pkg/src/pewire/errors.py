"""Exception hierarchy shared by every pewire module."""


class PewireError(Exception):
    """Base class for all pewire errors."""


class ShapeError(PewireError, ValueError):
    """Tensor extents do not line up for the requested operation."""


class ConfigError(PewireError, ValueError):
    """Invalid model, wiring or experiment configuration."""


class ContractError(PewireError, ValueError):
    """A call violated an operation precondition."""


class NumericFault(PewireError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""

    def __init__(self, message: str, op: str | None = None, layer: int | None = None):
        super().__init__(message)
        self.op = op
        self.layer = layer


class FormatError(PewireError, ValueError):
    """A file does not match its byte layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UndefinedStatistic(PewireError, ValueError):
    """A correlation or cosine is undefined because a vector has zero spread or norm."""
