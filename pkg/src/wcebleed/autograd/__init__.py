"""Minimal reverse-mode tensor engine, optimizers and checkpoint I/O."""

from . import tensor as ops
from .checkpoint import CheckpointError, CheckpointVersionError, load_checkpoint, save_checkpoint
from .gradcheck import grad_check, projected
from .nn import MLP, Conv2d, LayerNorm, Linear, Module, parameter, zero_
from .optim import Adam, AdamW, AdamWState, LRSchedule, adamw_step, cosine_lr, warmup_cosine_lr
from .tensor import (
    BackwardError,
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    checked_mode,
    no_grad,
    set_checked,
)

__all__ = [
    "Adam",
    "AdamW",
    "AdamWState",
    "BackwardError",
    "CheckpointError",
    "CheckpointVersionError",
    "Conv2d",
    "LRSchedule",
    "LayerNorm",
    "Linear",
    "MLP",
    "Module",
    "NumericError",
    "ShapeError",
    "Tape",
    "Tensor",
    "adamw_step",
    "backward",
    "checked_mode",
    "cosine_lr",
    "grad_check",
    "load_checkpoint",
    "no_grad",
    "ops",
    "parameter",
    "projected",
    "save_checkpoint",
    "set_checked",
    "warmup_cosine_lr",
    "zero_",
]
