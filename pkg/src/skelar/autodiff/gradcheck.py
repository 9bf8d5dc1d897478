"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import DiffTensor, backward, no_grad


def numerical_grad(fn: Callable[[], DiffTensor], param: DiffTensor, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(param.values)
    flat = param.values.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            grad.reshape(-1)[i] = (up - down) / (2.0 * h)
    return grad


def max_violation(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4, atol: float = 1e-7) -> float:
    """Largest |a - n| / (rtol * max(|a|, |n|)) over entries beyond the absolute floor.

    A value <= 1 means every entry passes.
    """
    diff = np.abs(analytic - numeric)
    scale = rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    bad = diff > atol
    if not bad.any():
        return 0.0
    return float(np.max(diff[bad] / np.maximum(scale[bad], 1e-300)))


def check_gradients(fn: Callable[[], DiffTensor], params: Sequence[DiffTensor],
                    h: float = 1e-5, rtol: float = 1e-4, atol: float = 1e-7) -> list[float]:
    """Compare backward() against central differences for each parameter.

    ``fn`` must rebuild the scalar output from the current parameter values.
    Returns one violation ratio per parameter (<= 1 passes).
    """
    for p in params:
        p.zero_grad()
    backward(fn())
    analytic = [p.grad.copy() for p in params]
    return [max_violation(a, numerical_grad(fn, p, h), rtol, atol) for a, p in zip(analytic, params)]
