"""Minimal float64 tensor engine with tape-based reverse-mode autodiff."""
from . import ops
from .checkpoint import load as load_checkpoint, save as save_checkpoint
from .gradcheck import check_gradients, numerical_grad
from .nn import Linear, Module, parameter
from .optim import SGD, Adam, sgd_step
from .tensor import DiffTensor, Tape, backward, current_tape, no_grad, reset_tape

__all__ = [
    "Adam", "DiffTensor", "Linear", "Module", "SGD", "Tape", "backward", "check_gradients",
    "current_tape", "load_checkpoint", "no_grad", "numerical_grad", "ops", "parameter",
    "reset_tape", "save_checkpoint", "sgd_step",
]
