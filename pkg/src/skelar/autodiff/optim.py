"""Gradient-descent updates."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from ..errors import ContractError
from .tensor import DiffTensor


def _check(params):
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name or p.shape} has no gradient buffer")
    return params


def sgd_step(params: Iterable[DiffTensor], lr: float) -> None:
    """p <- p - lr * grad(p), then zero the gradients."""
    for p in _check(params):
        if lr != 0.0:
            p.values = p.values - lr * p.grad
        p.grad = np.zeros_like(p.values)


class SGD:
    def __init__(self, params: Iterable[DiffTensor], lr: float = 1e-2):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        sgd_step(self.params, self.lr)


class Adam:
    """Adam with bias correction; used for downstream HAR training."""

    def __init__(self, params: Iterable[DiffTensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        _check(self.params)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.values
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            p.values = p.values - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.grad = np.zeros_like(p.values)
