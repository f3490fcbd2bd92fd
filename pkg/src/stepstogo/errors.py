"""Exception types shared across the package."""


class StgError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(StgError, ValueError):
    """Bad configuration or mismatched shapes / dimensions."""


class NumericError(StgError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class FormatError(StgError):
    """Corrupt, truncated or version-mismatched file or blob."""


class ProtocolError(StgError):
    """Malformed or unexpected wire message."""


class DataError(StgError):
    """Dataset generation or sampling cannot proceed."""
