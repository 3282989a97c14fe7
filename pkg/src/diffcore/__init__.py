"""Minimal reverse-mode automatic differentiation over dense float32 arrays."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .layers import MLP, Conv1d, Conv2d, GroupNorm, LayerNorm, Linear, Module
from .optim import AdamState, adam_step
from .tensor import Graph, Parameter, ShapeError, Tensor, backward

__all__ = [
    "AdamState",
    "CheckpointError",
    "Conv1d",
    "Conv2d",
    "Graph",
    "GroupNorm",
    "LayerNorm",
    "Linear",
    "MLP",
    "Module",
    "Parameter",
    "ShapeError",
    "Tensor",
    "adam_step",
    "backward",
    "load_checkpoint",
    "save_checkpoint",
]
