"""Adam with linear warm-up and decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autograd import Parameter


def warmup_lr(base_lr: float, step: int, warmup_fraction: float, total_steps: int) -> float:
    """Learning rate for the ``step``-th update (1-based): ``base * min(1, step / warmup)``."""
    warm = warmup_fraction * total_steps
    if warm <= 0:
        return base_lr
    return base_lr * min(1.0, step / warm)


@dataclass
class AdamState:
    lr: float = 1e-3
    warmup_fraction: float = 0.0
    total_steps: int = 1
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def current_lr(self) -> float:
        return warmup_lr(self.lr, self.t + 1, self.warmup_fraction, self.total_steps)


def adam_step(params: Mapping[str, Parameter], state: AdamState) -> AdamState:
    """One in-place update of every trainable parameter; gradients are left intact."""
    lr = state.current_lr
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ValueError(f"adam_step: trainable parameter {name!r} has no gradient")
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data = p.data - lr * update
    state.t = t
    return state
