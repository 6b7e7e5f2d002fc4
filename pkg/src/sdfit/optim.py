"""Adam with decoupled weight decay, plus the cosine learning-rate helper."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Var

__all__ = ["Adam", "cosine_lr"]


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine anneal from base_lr at step 0 to 0 at the final step."""
    if total_steps <= 1:
        return base_lr
    t = min(max(step / (total_steps - 1), 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


class Adam:
    """Adam with decoupled weight decay (AdamW-style).

    Parameters whose id appears in `no_decay` are exempt from weight decay;
    per-parameter learning-rate multipliers come from `lr_mult`.
    """

    def __init__(self, params: list[Var], lr: float = 4e-4,
                 betas: tuple[float, float] = (0.9, 0.95),
                 weight_decay: float = 0.05, eps: float = 1e-8,
                 no_decay: set[int] | None = None,
                 lr_mult: dict[int, float] | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.no_decay = no_decay or set()
        self.lr_mult = lr_mult or {}
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.skipped = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> bool:
        """Apply one update. Returns False (and skips) on non-finite grads."""
        lr = self.lr if lr is None else lr
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        for g in grads:
            if not np.all(np.isfinite(g)):
                self.skipped += 1
                return False
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            plr = lr * self.lr_mult.get(id(p), 1.0)
            if self.weight_decay > 0.0 and id(p) not in self.no_decay:
                p.data -= plr * self.weight_decay * p.data
            p.data -= plr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True
