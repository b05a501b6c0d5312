"""Tissue-graph-refined semantic segmentation on a small numpy autodiff core."""

from .config import ModelConfig, RunConfig, SynthConfig, TrainConfig
from .model import ModelOutput, SegmentationModel
from .tensor import Tensor, backward, no_grad

__all__ = [
    "ModelConfig",
    "ModelOutput",
    "RunConfig",
    "SegmentationModel",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "backward",
    "no_grad",
]
__version__ = "0.1.0"
