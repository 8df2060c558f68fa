"""Crystal graph network interatomic potential with direct force and stress heads."""

from .crystal import CrystalStructure, generate_lj_toy, load_dataset, write_dataset
from .model import ModelConfig, init_params, load_checkpoint, predict, save_checkpoint
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CrystalStructure",
    "ModelConfig",
    "TrainConfig",
    "generate_lj_toy",
    "init_params",
    "load_checkpoint",
    "load_dataset",
    "predict",
    "save_checkpoint",
    "train",
    "write_dataset",
]
