"""Recurrent fully convolutional networks for online binary video segmentation."""

from .data import FrameSequence, MovingSpriteConfig, split, synthesize_dataset
from .experiments import ComparisonConfig, compare
from .metrics import MetricsReport, aggregate, score
from .model import PRESETS, ArchitectureSpec, Model, build_preset, forward_window, infer_shapes
from .tensor import Record, Tensor, backward, no_record
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "FrameSequence", "MovingSpriteConfig", "split", "synthesize_dataset",
    "ComparisonConfig", "compare",
    "MetricsReport", "aggregate", "score",
    "PRESETS", "ArchitectureSpec", "Model", "build_preset", "forward_window", "infer_shapes",
    "Record", "Tensor", "backward", "no_record",
    "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
]
__version__ = "0.1.0"
