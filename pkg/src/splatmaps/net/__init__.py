"""Toy multi-view stereo network predicting GS-maps, and its training loop."""

from .checkpoint import CheckpointFormatError, load_model, read_checkpoint, save_model, write_checkpoint
from .config import Config, ModelConfig, TrainConfig, load_config, save_config
from .layers import Attention, attention_weights
from .model import (
    DenseHead,
    GlobalFusion,
    GsMapNet,
    MatchHead,
    PairDecoder,
    PairingError,
    PatchEncoder,
    RefineNet,
    TokenGrid,
    default_pairing,
)
from .train import (
    TrainingDivergedError,
    TrainState,
    correspondences,
    predict_gsmap,
    prepare_scene,
    train_two_stage,
)

__all__ = [
    "Attention",
    "CheckpointFormatError",
    "Config",
    "DenseHead",
    "GlobalFusion",
    "GsMapNet",
    "MatchHead",
    "ModelConfig",
    "PairDecoder",
    "PairingError",
    "PatchEncoder",
    "RefineNet",
    "TokenGrid",
    "TrainConfig",
    "TrainState",
    "TrainingDivergedError",
    "attention_weights",
    "correspondences",
    "default_pairing",
    "load_config",
    "load_model",
    "predict_gsmap",
    "prepare_scene",
    "read_checkpoint",
    "save_config",
    "save_model",
    "train_two_stage",
    "write_checkpoint",
]
