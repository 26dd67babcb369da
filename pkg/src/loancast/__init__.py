"""Wildfire danger classification with a two-branch 2D/3D CNN, location-conditioned
normalization (LOAN) and day-of-year encoding, on a small numpy autodiff core."""
from .datacube import CubeArchive, generate_synthetic, read_archive, write_archive
from .errors import ContractError, DimensionError, FormatError, LoancastError
from .model import ModelConfig, build_model, load_model, param_count, save_state, tiny_config
from .tensor import Tensor, no_grad
from .trainer import Trainer, TrainConfig, evaluate

__version__ = "0.1.0"

__all__ = [
    "ContractError", "CubeArchive", "DimensionError", "FormatError", "LoancastError", "ModelConfig",
    "Tensor", "TrainConfig", "Trainer", "build_model", "evaluate", "generate_synthetic", "load_model",
    "no_grad", "param_count", "read_archive", "save_state", "tiny_config", "write_archive",
]
