"""Minimal float32 tensor library with reverse-mode autodiff and Adam(W)."""

from . import dtnsr, ops
from .gradcheck import GradCheckReport, NonDeterministicError, gradient_check, relative_error
from .optim import adam_step, adamw_step
from .tensor import Node, Parameter, Tape, Tensor, backward, no_grad, precision

__all__ = [
    "GradCheckReport",
    "NonDeterministicError",
    "Node",
    "Parameter",
    "Tape",
    "Tensor",
    "adam_step",
    "adamw_step",
    "backward",
    "dtnsr",
    "gradient_check",
    "no_grad",
    "ops",
    "precision",
    "relative_error",
]
