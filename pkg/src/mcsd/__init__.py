"""MCSD: a causal sequence model with multi-channel slope and decay mixing.

Trains in parallel form and decodes with a constant-size recurrent state.
"""

from .block import VARIANTS, MCSDConfig, build_channel_masks, mcsd_forward
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DegenerateRowError,
    MCSDError,
    ShapeError,
    TrainingError,
    VocabularyError,
)
from .model import Decoder, ModelConfig, forward_parallel, generate, init_params
from .tensor import Tape, Tensor
from .train import ByteTokenizer, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "VARIANTS",
    "ByteTokenizer",
    "ConfigError",
    "ContractError",
    "DataError",
    "Decoder",
    "DegenerateRowError",
    "MCSDConfig",
    "MCSDError",
    "ModelConfig",
    "ShapeError",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainingError",
    "VocabularyError",
    "build_channel_masks",
    "forward_parallel",
    "generate",
    "init_params",
    "load_checkpoint",
    "mcsd_forward",
    "save_checkpoint",
    "train",
]
