"""Optimizers, global-norm gradient clipping and learning-rate schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .tensor import Tensor

SCHEDULE_KINDS = ("warmup-cosine", "step-decay", "constant")
OPTIMIZER_KINDS = ("sgd-momentum", "adamw")


@dataclass
class LrSchedule:
    kind: str = "warmup-cosine"
    base_lr: float = 0.03
    warmup_steps: int = 0
    total_steps: int = 1
    step_period: int = 1
    step_factor: float = 0.5

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if self.base_lr < 0:
            raise ValueError("base_lr must be >= 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.step_period < 1:
            raise ValueError("step_period must be >= 1")
        if not 0 < self.step_factor <= 1:
            raise ValueError("step_factor must lie in (0, 1]")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at optimizer step ``step`` (0-indexed, inclusive of ``total_steps``)."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    base = schedule.base_lr
    if schedule.kind == "constant":
        return base
    if schedule.kind == "step-decay":
        return base * schedule.step_factor ** (step // schedule.step_period)
    warm = schedule.warmup_steps
    if step < warm:
        return base * step / warm
    span = schedule.total_steps - warm
    if span <= 0:
        return 0.0
    progress = (step - warm) / span
    return max(0.0, base * 0.5 * (1.0 + math.cos(math.pi * progress)))


@dataclass
class OptimizerState:
    """Optimizer hyperparameters plus per-parameter moment buffers keyed by name."""

    kind: str = "sgd-momentum"
    momentum: float = 0.9
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    steps: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZER_KINDS}")


def optimizer_step(state: OptimizerState, params: Mapping[str, Tensor], lr: float) -> Mapping[str, Tensor]:
    """Update ``params`` in place from their ``.grad`` and return them.

    sgd-momentum: ``v = momentum*v + (g + wd*p); p -= lr*v``.
    adamw: decoupled decay ``p *= 1 - lr*wd`` followed by the bias-corrected
    Adam step.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    lr = float(lr)
    state.steps += 1
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        if state.kind == "sgd-momentum":
            if state.weight_decay:
                g = g + state.weight_decay * p.data
            v = state.velocity.get(name)
            if v is None:
                v = state.velocity[name] = np.zeros_like(p.data)
            v *= state.momentum
            v += g
            p.data -= lr * v
        else:
            b1, b2 = state.betas
            m = state.exp_avg.setdefault(name, np.zeros_like(p.data))
            s = state.exp_avg_sq.setdefault(name, np.zeros_like(p.data))
            if state.weight_decay:
                p.data *= 1.0 - lr * state.weight_decay
            m *= b1
            m += (1.0 - b1) * g
            s *= b2
            s += (1.0 - b2) * g * g
            c1 = 1.0 - b1**state.steps
            c2 = 1.0 - b2**state.steps
            p.data -= lr * (m / c1) / (np.sqrt(s / c2) + state.eps)
    return params


def global_norm(grads: Iterable[np.ndarray]) -> float:
    total = 0.0
    for g in grads:
        g64 = np.asarray(g, dtype=np.float64).reshape(-1)
        total += float(np.dot(g64, g64))
    return math.sqrt(total)


def clip_global_norm(params, max_norm: float) -> float:
    """Rescale gradients so their joint L2 norm is at most ``max_norm``.

    ``params`` is a mapping or iterable of tensors with ``.grad`` populated.
    Returns the norm before clipping. Norms within float32 rounding
    (relative 1e-6) of ``max_norm`` count as not exceeding it, which makes
    the operation idempotent.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    tensors = list(params.values()) if isinstance(params, Mapping) else list(params)
    grads = [t.grad for t in tensors if t.grad is not None]
    norm = global_norm(grads)
    if norm > max_norm * (1.0 + 1e-6):
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm
