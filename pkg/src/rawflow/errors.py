"""Exception types shared across the package."""


class RawflowError(Exception):
    pass


class DimensionError(RawflowError, ValueError):
    """Array shapes do not agree."""


class CapabilityError(RawflowError, NotImplementedError):
    """Requested feature (codec, primitive) is not supported."""


class NumericError(RawflowError, ArithmeticError):
    """NaN or other non-finite value where a finite one is required."""


class ParseError(RawflowError, ValueError):
    pass


class PreconditionError(RawflowError, ValueError):
    pass


class ConfigError(RawflowError, ValueError):
    pass


class VersionError(RawflowError, ValueError):
    """Checkpoint version or config does not match what the caller expects."""
