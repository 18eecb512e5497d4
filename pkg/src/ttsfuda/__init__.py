"""Two-stage source-free domain adaptation for image segmentation."""

from .config import AdaptConfig, load_config
from .data import SegDataset, SegSample, SynthShiftSpec, UnlabeledView, synth_shift
from .estimators import SourceSegmenter, TTSFUDAAdapter
from .exceptions import (
    CheckpointError,
    ConfigError,
    DatasetError,
    IncompatibleCheckpointError,
    ShapeError,
    TrainingDivergedError,
)
from .metrics import EvalReport, dice, evaluate
from .models import ArchSpec, UNet, build_model, load_checkpoint, save_checkpoint
from .pipeline import adapt, train_source
from .pseudolabel import adapt_stage1
from .selftrain import adapt_stage2

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig",
    "ArchSpec",
    "CheckpointError",
    "ConfigError",
    "DatasetError",
    "EvalReport",
    "IncompatibleCheckpointError",
    "SegDataset",
    "SegSample",
    "ShapeError",
    "SourceSegmenter",
    "SynthShiftSpec",
    "TTSFUDAAdapter",
    "TrainingDivergedError",
    "UNet",
    "UnlabeledView",
    "adapt",
    "adapt_stage1",
    "adapt_stage2",
    "build_model",
    "dice",
    "evaluate",
    "load_checkpoint",
    "load_config",
    "save_checkpoint",
    "synth_shift",
    "train_source",
]
