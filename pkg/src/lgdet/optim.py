"""Adam with decoupled weight decay, plus the step-decay learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    """One in-place Adam update with bias correction.

    Weight decay is decoupled and applied to the parameters before the
    moment-based step: ``p <- p - lr * wd * p``.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if weight_decay:
            p -= lr * weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState()

    def step(self) -> None:
        data = {getattr(p, "name", None) or str(i): p.data for i, p in enumerate(self.params)}
        grads = {getattr(p, "name", None) or str(i): (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for i, p in enumerate(self.params)}
        adam_step(data, grads, self.state, self.lr, self.betas, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)


def step_decay_lr(base_lr: float, epoch: int, milestones: Sequence[int], factor: float = 0.2) -> float:
    """Learning rate for 0-based ``epoch``: multiplied by ``factor`` at each reached milestone."""
    return base_lr * factor ** sum(1 for m in milestones if epoch >= m)
