"""Minimal tensor library with reverse-mode autodiff."""
from . import functional
from .optim import (
    LrSchedule,
    OptimizerState,
    clip_global_norm,
    global_norm,
    lr_at,
    optimizer_step,
)
from .tensor import (
    GraphError,
    ShapeError,
    Tensor,
    broadcast_to,
    concat,
    is_grad_enabled,
    matmul,
    no_grad,
)

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "concat",
    "broadcast_to",
    "functional",
    "LrSchedule",
    "OptimizerState",
    "lr_at",
    "optimizer_step",
    "clip_global_norm",
    "global_norm",
]
