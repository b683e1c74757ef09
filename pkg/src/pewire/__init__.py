"""Position-embedding wiring variants for a from-scratch NumPy Vision Transformer."""

from pewire.errors import (
    ConfigError,
    ContractError,
    FormatError,
    NumericFault,
    PewireError,
    ShapeError,
    UndefinedStatistic,
)
from pewire.model import DEIT_B, DEIT_S, DEIT_TI, TOY_TI, HeadMode, ModelConfig, ModelParams, count_params
from pewire.wiring import forward
from pewire.wiring_config import PRESETS, WiringConfig, WiringVariant, variant_preset

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "FormatError",
    "NumericFault",
    "PewireError",
    "ShapeError",
    "UndefinedStatistic",
    "DEIT_B",
    "DEIT_S",
    "DEIT_TI",
    "TOY_TI",
    "HeadMode",
    "ModelConfig",
    "ModelParams",
    "count_params",
    "forward",
    "PRESETS",
    "WiringConfig",
    "WiringVariant",
    "variant_preset",
]
