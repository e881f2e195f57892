"""Tile-level histopathology grading with a triple-stream residual network."""

from .errors import TriStreamError
from .estimator import TriStreamClassifier
from .model import TriStreamNet, build_tristream, load_checkpoint, save_checkpoint
from .slides import (DatasetManifest, PyramidalSlide, SlideSpec, TileRecord,
                     generate_synthetic_slide, load_slide, sample_balanced_tiles)
from .stream import StreamConfig, build_stream, layer_count, stream_forward
from .tensor import Tensor
from .training import TrainConfig, run_policy

__all__ = [
    "TriStreamError",
    "TriStreamClassifier",
    "TriStreamNet",
    "build_tristream",
    "load_checkpoint",
    "save_checkpoint",
    "DatasetManifest",
    "PyramidalSlide",
    "SlideSpec",
    "TileRecord",
    "generate_synthetic_slide",
    "load_slide",
    "sample_balanced_tiles",
    "StreamConfig",
    "build_stream",
    "layer_count",
    "stream_forward",
    "Tensor",
    "TrainConfig",
    "run_policy",
]

__version__ = "0.1.0"
