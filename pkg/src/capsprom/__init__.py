"""Capsule-network promoter classification with a CNN baseline, on a small numpy autodiff core."""

from .capsnet import CapsProm, CapsPromConfig, MarginLossConfig
from .cnn import CnnConfig, CnnProm
from .data import FoldPlan, SequenceRecord, load_dataset, stratified_kfold
from .metrics import ConfusionMatrix, compute
from .train import TrainConfig, cross_validate

__version__ = "0.1.0"

__all__ = [
    "CapsProm", "CapsPromConfig", "MarginLossConfig", "CnnConfig", "CnnProm", "FoldPlan", "SequenceRecord",
    "load_dataset", "stratified_kfold", "ConfusionMatrix", "compute", "TrainConfig", "cross_validate",
]
