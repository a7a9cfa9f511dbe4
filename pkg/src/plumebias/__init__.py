"""Coverage-bias study tools for methane plume detection on cloud-masked tiles."""

from .impute import ImputationStrategy, impute
from .model import ModelKind, TrainConfig, train
from .tiles import Dataset, Tile, load_dataset, save_dataset

__all__ = [
    "Dataset", "ImputationStrategy", "ModelKind", "Tile", "TrainConfig",
    "impute", "load_dataset", "save_dataset", "train",
]
__version__ = "0.1.0"
