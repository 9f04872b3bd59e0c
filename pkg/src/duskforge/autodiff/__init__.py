"""Minimal numpy tensor engine with reverse-mode differentiation."""
from . import ops
from .nn import BatchNorm, Conv2d, Linear, Module, Parameter
from .optim import SGD, Adam, adam_step, cosine_lr, sgd_step
from .serialize import CheckpointError
from .tensor import (
    AutodiffError,
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    get_default_dtype,
    grad_enabled,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "ops", "Tensor", "Parameter", "Module", "Conv2d", "Linear", "BatchNorm",
    "SGD", "Adam", "sgd_step", "adam_step", "cosine_lr", "backward", "no_grad",
    "grad_enabled", "as_tensor", "default_dtype", "get_default_dtype", "set_default_dtype",
    "AutodiffError", "ShapeError", "NonFiniteError", "GraphError", "CheckpointError",
]
