"""Adam with decoupled weight decay, and a half-cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place of ``param.data``.

    Weight decay is decoupled (AdamW form). A ``None`` gradient counts as zero.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for i, p in enumerate(params):
        g = grads[i]
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or state.m[i].shape != p.data.shape:
            raise ValueError(f"shape mismatch for parameter {i}: {p.data.shape} vs {g.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        update = (state.m[i] / bc1) / (np.sqrt(state.v[i] / bc2) + state.eps)
        p.data = p.data - state.lr * update - state.lr * state.weight_decay * p.data


class Adam:
    """Thin stateful wrapper over :func:`adam_step` for a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr=1e-3, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, weight_decay=weight_decay, betas=betas, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)


@dataclass(frozen=True)
class CosineSchedule:
    base_lr: float
    min_lr: float
    total_steps: int


def cosine_lr(step: int, schedule: CosineSchedule) -> float:
    """Half-cosine decay from ``base_lr`` at step 0 to ``min_lr`` at ``total_steps``."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.total_steps == 0:
        return schedule.base_lr
    frac = step / schedule.total_steps
    return schedule.min_lr + 0.5 * (schedule.base_lr - schedule.min_lr) * (1.0 + math.cos(math.pi * frac))
