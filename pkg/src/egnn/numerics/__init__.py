"""Small dense-tensor engine: reverse-mode autodiff, layer ops, and Adam."""

from . import kernels, ops
from .optim import AdamState, adam_step, halve_lr_schedule
from .tensor import (
    ComputationTape,
    NumericalError,
    Tensor,
    backward,
    current_tape,
    default_dtype,
    get_default_dtype,
    no_grad,
    reset_tape,
    set_default_dtype,
)

__all__ = [
    "AdamState",
    "ComputationTape",
    "NumericalError",
    "Tensor",
    "adam_step",
    "backward",
    "current_tape",
    "default_dtype",
    "get_default_dtype",
    "halve_lr_schedule",
    "kernels",
    "no_grad",
    "ops",
    "reset_tape",
    "set_default_dtype",
]
