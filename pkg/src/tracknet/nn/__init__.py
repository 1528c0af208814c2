"""Minimal dense-tensor layer with reverse-mode differentiation."""

from . import ops
from .gradcheck import GradCheckReport, gradient_check
from .layers import Conv2d, Conv3d, Linear, Module
from .optim import AdamState, adam_step
from .serialize import ModelFormatError
from .tensor import Graph, NonFiniteError, ShapeError, Tensor, backward, forward_backward, parameter

__all__ = [
    "ops", "GradCheckReport", "gradient_check", "Conv2d", "Conv3d", "Linear", "Module",
    "AdamState", "adam_step", "ModelFormatError", "Graph", "NonFiniteError", "ShapeError",
    "Tensor", "backward", "forward_backward", "parameter",
]
