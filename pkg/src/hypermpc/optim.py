"""AdamW with decoupled weight decay, plus value clipping for gradients."""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeMismatch


def clip_by_value(grads: dict, bound: float) -> dict:
    """Clamp every gradient entry to [-bound, +bound]."""
    if bound <= 0:
        raise ValueError(f"clip bound must be positive, got {bound}")
    return {k: np.clip(g, -bound, bound) for k, g in grads.items()}


class AdamW:
    """Decoupled-weight-decay Adam over a dict of named parameter arrays.

    Parameter arrays are updated in place; first/second moments are kept per
    parameter and step_count increases by one per update.
    """

    def __init__(self, params: dict, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.first_moment = {k: np.zeros_like(v) for k, v in params.items()}
        self.second_moment = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeMismatch(
                    f"adamw: gradient shape {g.shape} does not match parameter '{name}' {p.shape}")
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay != 0.0:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
