"""Differentiable operations on :class:`DiffTensor`.

Broadcasting is limited: in a binary op one operand's shape must broadcast to
the other's, and the result keeps the larger shape.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, NumericError, ShapeError
from .tensor import DiffTensor, as_tensor, record


class MacCounter:
    """Running total of forward-pass multiply-adds in matmul and convolutions."""

    def __init__(self):
        self.total = 0


_counters: list[MacCounter] = []


@contextmanager
def count_macs():
    counter = MacCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _tally(n: int) -> None:
    for c in _counters:
        c.total += int(n)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_shape(a: DiffTensor, b: DiffTensor, opname: str) -> tuple[int, ...]:
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None
    if shape != a.shape and shape != b.shape:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} would broadcast mutually")
    return shape


def add(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "add")
    return record(a.values + b.values, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "sub")
    return record(a.values - b.values, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "mul")
    av, bv = a.values, b.values
    return record(av * bv, (a, b),
                  lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "div")
    av, bv = a.values, b.values
    out = av / bv
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)))


def matmul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    av, bv = a.values, b.values
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_shared_right(a, b)
    if a.ndim < b.ndim and a.shape[:-2] == b.shape[b.ndim - a.ndim:-2]:
        return _matmul_shared_left(a, b)

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    out = av @ bv
    _tally(out.size * a.shape[-1])
    return record(out, (a, b), back)


def _matmul_shared_right(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    # [..., p, q] @ [q, r] as a single GEMM over the flattened batch.
    q, r = b.shape
    a2 = a.values.reshape(-1, q)
    bv = b.values
    out = (a2 @ bv).reshape(*a.shape[:-1], r)
    _tally(out.size * q)

    def back(g):
        g2 = g.reshape(-1, r)
        ga = (g2 @ bv.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), back)


def _matmul_shared_left(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    # a [G..., p, q] applied to every leading slice of b [E..., G..., q, r].
    n_extra = b.ndim - a.ndim
    ext = b.shape[:n_extra]
    grp = a.shape[:-2]
    q, r = b.shape[-2:]
    p = a.shape[-2]
    ng = len(grp)
    # [E, G, q, r] -> [G, q, E, r]
    perm = tuple(range(n_extra, n_extra + ng)) + (n_extra + ng,) + tuple(range(n_extra)) + (b.ndim - 1,)
    bt = np.transpose(b.values, perm).reshape(*grp, q, -1)
    av = a.values
    out_t = av @ bt                                     # [G, p, E*r]
    _tally(out_t.size * q)
    inv = np.argsort(perm)
    out = np.transpose(out_t.reshape(*grp, p, *ext, r), inv)

    def back(g):
        gt = np.transpose(g, perm).reshape(*grp, p, -1)
        ga = gt @ np.swapaxes(bt, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gbt = np.swapaxes(av, -1, -2) @ gt
            gb = np.transpose(gbt.reshape(*grp, q, *ext, r), inv)
        return ga, gb

    return record(out, (a, b), back)


def relu(x) -> DiffTensor:
    x = as_tensor(x)
    mask = x.values > 0
    return record(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def exp(x) -> DiffTensor:
    x = as_tensor(x)
    out = np.exp(x.values)
    return record(out, (x,), lambda g: (g * out,))


def log(x) -> DiffTensor:
    x = as_tensor(x)
    xv = x.values
    return record(np.log(xv), (x,), lambda g: (g / xv,))


def square(x) -> DiffTensor:
    x = as_tensor(x)
    xv = x.values
    return record(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> DiffTensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return record(x.values.sum(axis=axes, keepdims=keepdims), (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> DiffTensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> DiffTensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} into {tuple(shape)}") from None
    return record(out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes: Optional[Sequence[int]] = None) -> DiffTensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(x.values, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a: int, b: int) -> DiffTensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def index(x, idx) -> DiffTensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return record(x.values[idx], (x,), back)


def concat(tensors: Sequence, axis: int = 0) -> DiffTensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, tensors, back)


def stack(tensors: Sequence, axis: int = 0) -> DiffTensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.values for t in tensors], axis=axis)

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return record(out, tensors, back)


def pad_last(x, left: int, right: int) -> DiffTensor:
    """Zero-pad the last axis."""
    x = as_tensor(x)
    width = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    n = x.shape[-1]
    return record(np.pad(x.values, width), (x,), lambda g: (g[..., left:left + n],))


def softmax(x, axis: int = -1) -> DiffTensor:
    x = as_tensor(x)
    if np.isnan(x.values).any():
        raise NumericError("softmax input contains NaN")
    z = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (x,), back)


def log_softmax(x, axis: int = -1) -> DiffTensor:
    x = as_tensor(x)
    if np.isnan(x.values).any():
        raise NumericError("log_softmax input contains NaN")
    z = x.values - x.values.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return record(out, (x,), back)


def cross_entropy(logits, targets, ignore_index: Optional[int] = None) -> DiffTensor:
    """Mean negative log-likelihood over rows whose target is not ignored.

    ``logits`` is [n, classes]; ``targets`` holds n integer class indices.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n, classes] logits, got {logits.shape}")
    t = np.asarray(targets).reshape(-1).astype(np.int64)
    n, c = logits.shape
    if t.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} logit rows but {t.shape[0]} targets")
    keep = np.ones(n, dtype=bool) if ignore_index is None else t != ignore_index
    bad = keep & ((t < 0) | (t >= c))
    if bad.any():
        raise IndexError(f"target {int(t[bad][0])} out of range for {c} classes")
    rows = np.nonzero(keep)[0]
    if rows.size == 0:
        return record(np.zeros(()), (logits,), lambda g: (np.zeros(logits.shape),))
    lsm = log_softmax(logits, axis=1)
    picked = index(lsm, (rows, t[rows]))
    return mul(sum(picked), -1.0 / rows.size)


def mse(pred, target, mask: Optional[np.ndarray] = None) -> DiffTensor:
    """Mean squared error; with ``mask`` only entries where it is true count."""
    pred = as_tensor(pred)
    target = np.asarray(target.values if isinstance(target, DiffTensor) else target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    w = np.ones(pred.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    count = w.sum()
    if count == 0:
        return record(np.zeros(()), (pred,), lambda g: (np.zeros(pred.shape),))
    diff = (pred.values - target) * w
    return record(np.array((diff * diff).sum() / count), (pred,),
                  lambda g: (g * 2.0 * diff / count,))


def layer_norm(x, eps: float = 1e-5) -> DiffTensor:
    """Normalise the last axis to zero mean and unit variance (no affine part)."""
    x = as_tensor(x)
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return record(y, (x,), back)


def conv1d(x, kernel, stride: int = 1) -> DiffTensor:
    """Valid cross-correlation of [..., c_in, t] with a [c_out, c_in, w] kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1:
        raise ContractError(f"stride must be positive, got {stride}")
    if x.ndim < 2 or kernel.ndim != 3:
        raise ShapeError(f"conv1d expects x [..., c_in, t] and kernel [c_out, c_in, w]; got {x.shape}, {kernel.shape}")
    c_out, c_in, w = kernel.shape
    if x.shape[-2] != c_in:
        raise ShapeError(f"conv1d: input channels {x.shape[-2]} != kernel channels {c_in}")
    t = x.shape[-1]
    if t < w:
        raise ShapeError(f"conv1d: input length {t} shorter than kernel width {w}")
    t_out = (t - w) // stride + 1
    lead = x.shape[:-2]
    xv = x.values.reshape(-1, c_in, t)
    kv = kernel.values
    n = xv.shape[0]
    patches = sliding_window_view(xv, w, axis=2)[:, :, ::stride, :]  # [N, c_in, t_out, w]
    cols = patches.transpose(0, 2, 1, 3).reshape(n * t_out, c_in * w)  # im2col, one copy
    kmat = kv.reshape(c_out, c_in * w)
    out = cols @ kmat.T                                                 # [N*t_out, c_out]
    _tally(out.size * c_in * w)
    out = np.ascontiguousarray(out.reshape(n, t_out, c_out).transpose(0, 2, 1)).reshape(*lead, c_out, t_out)

    def back(g):
        g2 = g.reshape(n, c_out, t_out).transpose(0, 2, 1).reshape(n * t_out, c_out)
        gk = (g2.T @ cols).reshape(kv.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gp = np.matmul(kmat.T, g.reshape(n, c_out, t_out)).reshape(n, c_in, w, t_out)
            gx = np.zeros_like(xv)
            span = stride * (t_out - 1) + 1
            for j in range(w):
                gx[:, :, j:j + span:stride] += gp[:, :, j, :]
            gx = gx.reshape(x.shape)
        return gx, gk

    return record(out, (x, kernel), back)


def conv1d_transpose(x, kernel, stride: int = 1) -> DiffTensor:
    """Scatter-add transpose convolution: [..., c_in, t] -> [..., c_out, (t-1)*stride + w].

    ``kernel`` is [c_in, c_out, w]; this is the adjoint of :func:`conv1d` with
    the same kernel array.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1:
        raise ContractError(f"stride must be positive, got {stride}")
    if x.ndim < 2 or kernel.ndim != 3:
        raise ShapeError(f"conv1d_transpose expects x [..., c_in, t] and kernel [c_in, c_out, w]; got {x.shape}, {kernel.shape}")
    c_in, c_out, w = kernel.shape
    if x.shape[-2] != c_in:
        raise ShapeError(f"conv1d_transpose: input channels {x.shape[-2]} != kernel channels {c_in}")
    t = x.shape[-1]
    if t < 1:
        raise ShapeError("conv1d_transpose: empty input")
    t_out = (t - 1) * stride + w
    lead = x.shape[:-2]
    xv = x.values.reshape(-1, c_in, t)
    kv = kernel.values
    span = stride * (t - 1) + 1
    proj = np.tensordot(xv, kv, axes=([1], [0]))  # [N, t, c_out, w]
    _tally(proj.size * c_in)
    out = np.zeros((xv.shape[0], c_out, t_out))
    for j in range(w):
        out[:, :, j:j + span:stride] += proj[:, :, :, j].transpose(0, 2, 1)
    out = out.reshape(*lead, c_out, t_out)

    def back(g):
        g2 = g.reshape(-1, c_out, t_out)
        gp = np.stack([g2[:, :, j:j + span:stride] for j in range(w)], axis=-1)  # [N, c_out, t, w]
        gx = gk = None
        if x.requires_grad:
            gx = np.tensordot(gp, kv, axes=([1, 3], [1, 2]))  # [N, t, c_in]
            gx = np.ascontiguousarray(gx.transpose(0, 2, 1)).reshape(x.shape)
        if kernel.requires_grad:
            gk = np.tensordot(xv, gp, axes=([0, 2], [0, 2]))  # [c_in, c_out, w]
        return gx, gk

    return record(out, (x, kernel), back)
