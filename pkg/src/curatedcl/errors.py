"""Exception hierarchy shared by the library and the CLI."""


class CuratedCLError(Exception):
    """Base class for all library errors."""


class DimensionError(CuratedCLError, ValueError):
    """Tensor shapes do not conform."""


class ConfigError(CuratedCLError, ValueError):
    """Invalid configuration (bad key, bad value, impossible geometry)."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ContractError(CuratedCLError, ValueError):
    """A precondition of an operation was violated."""


class FormatError(CuratedCLError, ValueError):
    """On-disk data does not match the expected binary layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(CuratedCLError, ArithmeticError):
    """Training produced non-finite values."""
