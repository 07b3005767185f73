"""Scatter-image CNN: model, kernels, training, weight serialization."""

from .kernels import BACKEND
from .model import (
    PRESETS,
    ModelSpec,
    ModelWeights,
    build_model,
    forward,
    loss_and_gradients,
    param_count,
    spec_from_weights,
)
from .train import (
    EpochStats,
    OptimizerState,
    TrainConfig,
    adam_step,
    evaluate,
    train,
)
from .weights_io import (
    deserialize_weights,
    load_weights,
    save_weights,
    serialize_weights,
)

__all__ = [
    "BACKEND",
    "PRESETS",
    "ModelSpec",
    "ModelWeights",
    "build_model",
    "forward",
    "loss_and_gradients",
    "param_count",
    "spec_from_weights",
    "EpochStats",
    "OptimizerState",
    "TrainConfig",
    "adam_step",
    "evaluate",
    "train",
    "deserialize_weights",
    "load_weights",
    "save_weights",
    "serialize_weights",
]
