"""AdamW / Adam and the learning-rate schedules used by the trainers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class LRSchedule:
    lr_max: float
    lr_min: float
    total_steps: int

    def __post_init__(self):
        if self.lr_min > self.lr_max:
            raise ValueError(f"lr_min {self.lr_min} exceeds lr_max {self.lr_max}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def cosine_lr(step: int, sched: LRSchedule) -> float:
    """Cosine annealing from ``lr_max`` at step 0 to ``lr_min`` at ``total_steps``."""
    if step < 0 or step > sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    # endpoints returned verbatim so the boundary identities hold bit-exactly
    if step == 0:
        return sched.lr_max
    if step == sched.total_steps:
        return sched.lr_min
    return sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1 + math.cos(math.pi * step / sched.total_steps))


def warmup_cosine_lr(step: int, sched: LRSchedule, warmup_steps: int) -> float:
    """Linear ramp ``lr_max*(step+1)/W`` for ``step < W``, then cosine decay."""
    if warmup_steps <= 0:
        return cosine_lr(step, sched)
    if step < warmup_steps:
        return sched.lr_max * (step + 1) / warmup_steps
    decay = LRSchedule(sched.lr_max, sched.lr_min, max(1, sched.total_steps - warmup_steps))
    return cosine_lr(min(step - warmup_steps, decay.total_steps), decay)


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: AdamWState, lr: float) -> None:
    """One in-place AdamW update with decoupled weight decay."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} does not match param {p.shape}")
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


class AdamW:
    """Thin optimizer wrapper binding AdamW state to parameter tensors."""

    def __init__(self, params: list[Tensor], weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamWState(beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def step(self, lr: float) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam(AdamW):
    """Plain Adam: the same moment recurrence without any weight decay."""

    def __init__(self, params: list[Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, weight_decay=0.0, betas=betas, eps=eps)
