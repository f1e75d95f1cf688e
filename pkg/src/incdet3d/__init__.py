"""Class-incremental 3-d object detection on synthetic point-cloud scenes."""

__version__ = "0.1.0"

from .errors import (EngineError, DimensionError, NumericError, ContractError,
                     ConfigError, StateError, FormatError, InputError)

__all__ = [
    "EngineError", "DimensionError", "NumericError", "ContractError",
    "ConfigError", "StateError", "FormatError", "InputError",
    "__version__",
]
