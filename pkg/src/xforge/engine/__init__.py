"""Minimal float32 tensor engine with taped reverse-mode differentiation."""

from . import functional
from .adam import AdamState, adam_step
from .checkpoint import FormatError, load_tensors, save_tensors
from .gradcheck import finite_difference_gradient, relative_error
from .ops import OPS, infer_shape
from .tensor import Entry, Gradients, ShapeError, Tape, Tensor, apply_op, backward, no_record

__all__ = [
    "AdamState",
    "Entry",
    "FormatError",
    "Gradients",
    "OPS",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "apply_op",
    "backward",
    "finite_difference_gradient",
    "functional",
    "infer_shape",
    "load_tensors",
    "no_record",
    "relative_error",
    "save_tensors",
]
