"""First-order optimizers and learning-rate schedules over autodiff tensors."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autodiff import Tensor


class SGD:
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf = [None] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                buf = self._buf[i]
                buf = g.copy() if buf is None else self.momentum * buf + g
                self._buf[i] = buf
                g = buf
            p.data = (p.data - self.lr * g).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self._t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self._t, 1 - b2**self._t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self._m[i] = b1 * self._m[i] + (1 - b1) * g
            self._v[i] = b2 * self._v[i] + (1 - b2) * g * g
            upd = (self._m[i] / c1) / (np.sqrt(self._v[i] / c2) + self.eps)
            p.data = (p.data - self.lr * upd).astype(p.dtype, copy=False)


def make_optimizer(kind: str, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
    if kind == "sgd":
        return SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    if kind == "adam":
        return Adam(params, lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


def cyclic_lr(step: int, total: int, max_lr: float, peak: float = 0.4) -> float:
    """Triangular one-cycle schedule: 0 -> max_lr at ``peak`` fraction -> 0."""
    if total <= 0:
        return max_lr
    frac = step / total
    if frac <= peak:
        return max_lr * frac / peak
    return max_lr * max(0.0, (1.0 - frac) / (1.0 - peak))


def cosine_lr(step: int, total: int, max_lr: float) -> float:
    if total <= 0:
        return max_lr
    return 0.5 * max_lr * (1.0 + math.cos(math.pi * min(step, total) / total))


def schedule_lr(kind: str, step: int, total: int, max_lr: float) -> float:
    if kind == "cyclic":
        return cyclic_lr(step, total, max_lr)
    if kind == "cosine":
        return cosine_lr(step, total, max_lr)
    if kind == "constant":
        return max_lr
    raise ValueError(f"unknown schedule {kind!r}")
