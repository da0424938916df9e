"""Real-time two-branch surgical instrument segmentation toolkit."""

from .data import TaskSpec
from .losses import LossWeights
from .network import NetworkConfig, Segmentor, build_segmentor
from .train import TrainConfig, Trainer, fit

__all__ = [
    "TaskSpec",
    "LossWeights",
    "NetworkConfig",
    "Segmentor",
    "build_segmentor",
    "TrainConfig",
    "Trainer",
    "fit",
]

__version__ = "0.1.0"
