"""Emotion reaction intensity estimation from face and audio feature sequences."""

from .autodiff import NumericalError, ParamStore, ShapeError, StateError, Tape, Tensor
from .features import Dataset, FeatureSequence, Sample, load_manifest
from .model import EMOTIONS, EriModel, ModelConfig, init_model, load_checkpoint, model_forward, save_checkpoint
from .train import AdamW, TrainConfig, evaluate, fit, l2_loss, lr_at_epoch, pcc

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "Dataset",
    "EMOTIONS",
    "EriModel",
    "FeatureSequence",
    "ModelConfig",
    "NumericalError",
    "ParamStore",
    "Sample",
    "ShapeError",
    "StateError",
    "Tape",
    "Tensor",
    "TrainConfig",
    "evaluate",
    "fit",
    "init_model",
    "l2_loss",
    "load_checkpoint",
    "load_manifest",
    "lr_at_epoch",
    "model_forward",
    "pcc",
    "save_checkpoint",
]
