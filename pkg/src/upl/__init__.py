"""Unsupervised prompt learning for frozen two-tower vision-language encoders."""

from .encoders import FrozenEncoderPair, ToyEncoderPair, load_encoder
from .errors import (
    ConfigError,
    CorruptionError,
    EmptySelectionError,
    InputError,
    TagMismatchError,
    UPLError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CorruptionError",
    "EmptySelectionError",
    "FrozenEncoderPair",
    "InputError",
    "TagMismatchError",
    "ToyEncoderPair",
    "UPLError",
    "load_encoder",
]
