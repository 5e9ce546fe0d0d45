"""Streaming causal spatio-temporal transformer for desk-scale 4D geometry."""

from .attention import AttentionParams, KVCache
from .geometry import CameraPose
from .losses import LossWeights
from .model import (FrameTokens, Model, ModelConfig, PredictionSet,
                    StreamingSession, load_checkpoint, save_checkpoint)
from .scenes import (SceneFrameGT, SceneSpec, dataset_read, dataset_write,
                     random_scene_spec, render_sequence)
from .tensor import Tape, Tensor
from .training import TrainConfig

__all__ = [
    "AttentionParams", "KVCache", "CameraPose", "LossWeights", "FrameTokens",
    "Model", "ModelConfig", "PredictionSet", "StreamingSession",
    "load_checkpoint", "save_checkpoint", "SceneFrameGT", "SceneSpec",
    "dataset_read", "dataset_write", "random_scene_spec", "render_sequence",
    "Tape", "Tensor", "TrainConfig",
]

__version__ = "0.1.0"
