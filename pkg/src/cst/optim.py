"""Adam optimizer with bias correction and the cosine-annealed learning rate."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine decay from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ConfigError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


class Adam:
    """Standard Adam. Moment buffers live per parameter; ``step`` applies one
    bias-corrected update and refuses to touch parameters if any gradient is
    non-finite."""

    def __init__(self, params: list[Tensor], lr: float = 4e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise ConfigError("Adam got a parameter with requires_grad=False")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else float(lr)
        grads = []
        for p, m in zip(self.params, self.m):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} != param shape {p.data.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient; step not applied")
            grads.append(g)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)
