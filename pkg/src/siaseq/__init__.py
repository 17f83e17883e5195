"""Desk-scale seq2seq headline editing: staged training, an importance-aware
loss, beam-search decoding, and repetition/diversity metrics."""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    NumericError,
    ShapeError,
    SiaSeqError,
)
from .numcore import Tape, Tensor, grad_check

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "NumericError",
    "ShapeError",
    "SiaSeqError",
    "Tape",
    "Tensor",
    "grad_check",
    "__version__",
]
