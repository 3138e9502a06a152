"""Sarcasm classification with a from-scratch autodiff core.

Convolution, GRU, bidirectional LSTM and multi-head self-attention layers are
built on :mod:`cglmha.tensor`. The recurrent layers run through fused kernels
(:mod:`cglmha.kernels`) that are compiled when possible and numpy otherwise.
"""
from .errors import (
    CglMhaError,
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    NumericError,
    ShapeError,
)
from .kernels import BACKEND
from .metrics import MetricsReport, macro_f1
from .model import ModelConfig, build_model, forward, load_checkpoint, predict, save_checkpoint
from .optim import Adam, AdamHyper
from .tensor import Tensor, backward, no_grad
from .trainer import RunConfig, ablate, evaluate, fit, gradcheck, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Adam", "AdamHyper", "CglMhaError", "CheckpointError", "ConfigError", "ContractError",
    "DataError", "MetricsReport", "ModelConfig", "NumericError", "RunConfig", "ShapeError", "Tensor",
    "ablate", "backward", "build_model", "evaluate", "fit", "forward", "gradcheck", "load_checkpoint",
    "macro_f1", "no_grad", "predict", "save_checkpoint", "train",
]
