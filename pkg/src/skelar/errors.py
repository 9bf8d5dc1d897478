"""Exception types shared across the package."""


class SkelarError(Exception):
    """Base class for all errors raised by skelar."""


class ShapeError(SkelarError, ValueError):
    pass


class ContractError(SkelarError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class NumericError(SkelarError, ArithmeticError):
    pass


class ConfigError(SkelarError, ValueError):
    pass


class DataError(SkelarError):
    pass


class ParseError(DataError):
    """Malformed input file. ``lineno`` is 1-based; 0 means end of input."""

    def __init__(self, message: str, lineno: int, source: str = "<stream>"):
        self.lineno = lineno
        self.source = source
        super().__init__(f"{source}:{lineno}: {message}")


class CheckpointError(DataError):
    pass
