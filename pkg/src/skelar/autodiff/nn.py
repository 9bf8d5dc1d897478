"""Parameter containers and the few layers shared by several models."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import DiffTensor


def parameter(values, name: Optional[str] = None) -> DiffTensor:
    return DiffTensor(values, requires_grad=True, name=name)


class Module:
    """Collects DiffTensor parameters from attributes, in assignment order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, DiffTensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[DiffTensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.values) for name, p in self.named_parameters(prefix))

    def load_state_dict(self, state, prefix: str = "", strict: bool = True) -> None:
        for name, p in self.named_parameters(prefix):
            if name not in state:
                if strict:
                    raise KeyError(f"missing parameter {name!r}")
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name!r}: stored shape {arr.shape} != {p.shape}")
            p.values = arr.copy()
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _walk(value, name):
    if isinstance(value, DiffTensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + "/")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}/{i}")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def he_normal(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Linear(Module):
    """y = x @ W + b over the last axis."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.W = parameter(glorot(rng, n_in, n_out, (n_in, n_out)))
        self.b = parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: DiffTensor) -> DiffTensor:
        y = ops.matmul(x, self.W)
        return ops.add(y, self.b) if self.b is not None else y
