"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op appends one record to the calling thread's current
:class:`Tape`. :func:`backward` walks that tape once, newest record first,
and then marks it consumed; the next op starts a fresh tape.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_local = threading.local()


class Tape:
    """Ordered record of the ops executed since the last backward pass."""

    def __init__(self):
        self.records: list[tuple[DiffTensor, tuple[DiffTensor, ...], BackwardFn]] = []
        self.consumed = False

    def __len__(self):
        return len(self.records)


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _local.tape = tape
    return tape


def reset_tape() -> None:
    """Drop everything recorded on this thread's tape without differentiating."""
    tape = getattr(_local, "tape", None)
    if tape is not None:
        tape.records.clear()
        tape.consumed = True


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class DiffTensor:
    """A float64 array that may take part in gradient computation.

    Leaves are created by the user (parameters, inputs). Non-leaves are
    produced by ops and remember the tape they were recorded on.
    """

    __array_priority__ = 100  # make ndarray <op> DiffTensor defer to us

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self.name = name
        self._tape: Optional[Tape] = None

    @classmethod
    def _result(cls, values: np.ndarray, requires_grad: bool) -> "DiffTensor":
        out = cls.__new__(cls)
        out.values = np.asarray(values, dtype=np.float64)
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._tape = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float(self.values.item())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def detach(self) -> "DiffTensor":
        return DiffTensor._result(self.values, False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffTensor(shape={self.shape}{flag})"

    # Operator sugar; implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, DiffTensor):
            return ops.div(self, other)
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


def as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor._result(np.asarray(x, dtype=np.float64), False)


def record(values: np.ndarray, inputs: Sequence[DiffTensor], backward_fn: BackwardFn) -> DiffTensor:
    """Wrap an op's forward output and put its backward rule on the tape."""
    inputs = tuple(inputs)
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = DiffTensor._result(values, needs)
    if needs:
        tape = current_tape()
        for t in inputs:
            if t._tape is not None and t._tape is not tape:
                raise ContractError(
                    "input was recorded on a tape that is consumed or owned by another thread; "
                    "re-run the forward pass"
                )
        out._tape = tape
        tape.records.append((out, inputs, backward_fn))
    return out


def backward(loss: DiffTensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")
    if loss._tape is None:
        loss.grad = loss.grad + 1.0
        return
    tape = loss._tape
    if tape.consumed:
        raise ContractError("tape already consumed by a previous backward pass; re-run the forward pass")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for out, inputs, fn in reversed(tape.records):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._tape is None:
                t.grad = t.grad + gi if t.grad is not None else np.array(gi, dtype=np.float64)
            else:
                key = id(t)
                pending[key] = pending[key] + gi if key in pending else gi
    tape.records.clear()
    tape.consumed = True
