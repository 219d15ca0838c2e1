"""Early-fusion RGB-T semantic segmentation on a small numpy autograd core."""

from .errors import ConfigError, ContractError, DimensionError, EFNetError, FormatError, TrainingDivergence
from .model import ModelConfig, build_model, count_params, forward, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "EFNetError",
    "FormatError",
    "ModelConfig",
    "Tensor",
    "TrainingDivergence",
    "backward",
    "build_model",
    "count_params",
    "forward",
    "grad_check",
    "load_checkpoint",
    "save_checkpoint",
]
