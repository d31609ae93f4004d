"""Adam with a fixed parameter order (deterministic updates)."""

from __future__ import annotations

import numpy as np

from ..tensor import Tensor


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, lr_scales: list[float] | None = None):
        self.params = list(params)
        self.lr_scales = [1.0] * len(self.params) if lr_scales is None else list(lr_scales)
        if len(self.lr_scales) != len(self.params):
            raise ValueError("lr_scales must match the parameter list")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = p.data - (self.lr * self.lr_scales[i]) * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / norm)
    return norm
