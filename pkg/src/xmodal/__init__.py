"""Cross-modal image/text association with hardest and semi-hard negative mining."""

from xmodal.errors import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    EvaluationError,
    InputError,
    MiningExhaustedError,
    NonFiniteError,
    XModalError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateInputError",
    "DimensionError",
    "EvaluationError",
    "InputError",
    "MiningExhaustedError",
    "NonFiniteError",
    "XModalError",
]
