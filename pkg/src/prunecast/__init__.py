"""Graph-pruned spatiotemporal forecasting with source-to-target transfer."""
from .data import NormStats, SignalMatrix, WindowedDataset
from .graph import TrafficGraph
from .model import STGCN, ModelConfig, TrainConfig
from .pruning import PruneConfig, PrunedContext, peel
from .transfer import TransferConfig, finetune, pretrain

__all__ = [
    "ModelConfig",
    "NormStats",
    "PruneConfig",
    "PrunedContext",
    "STGCN",
    "SignalMatrix",
    "TrafficGraph",
    "TrainConfig",
    "TransferConfig",
    "WindowedDataset",
    "finetune",
    "peel",
    "pretrain",
]

__version__ = "0.1.0"
