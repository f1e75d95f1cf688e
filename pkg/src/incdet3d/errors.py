"""Exception types shared across the package."""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EngineError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(EngineError):
    """A forward value or gradient became NaN/Inf."""


class ContractError(EngineError):
    """An operation was called in a way that violates its contract."""


class ConfigError(EngineError):
    """A configuration value is invalid or inconsistent."""


class StateError(EngineError):
    """A stateful object was used out of order (missing/duplicate state)."""


class FormatError(EngineError):
    """A serialized container is malformed, truncated, or mislabeled."""


class InputError(EngineError):
    """Runtime input data does not meet an operation's preconditions."""
