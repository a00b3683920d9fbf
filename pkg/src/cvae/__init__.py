"""VAEs for partially observed tabular data with posterior-consistency regularisation."""
from .dataio import Dataset, ScaleInfo, load_builtin, load_csv, minmax_scale, split
from .model import ModelSpec, VAEModel
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "ModelSpec",
    "ScaleInfo",
    "TrainConfig",
    "VAEModel",
    "load_builtin",
    "load_csv",
    "minmax_scale",
    "split",
    "train",
]
