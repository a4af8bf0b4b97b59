"""Reverse-mode differentiation over float64 numpy arrays."""

from cdcgen.diffmath import ops
from cdcgen.diffmath.gradcheck import NonDeterministicError, check_parameters, grad_check, relative_error
from cdcgen.diffmath.nn import (
    MLP,
    ActNorm,
    Conv2d,
    ConvTranspose2d,
    Linear,
    Module,
    ModuleList,
    Parameter,
    trainable,
)
from cdcgen.diffmath.tensor import (
    BackwardError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    grad_enabled,
    no_grad,
)

__all__ = [
    "ops",
    "Tensor",
    "Tape",
    "Parameter",
    "Module",
    "ModuleList",
    "Linear",
    "Conv2d",
    "ConvTranspose2d",
    "ActNorm",
    "MLP",
    "trainable",
    "backward",
    "no_grad",
    "grad_enabled",
    "as_tensor",
    "grad_check",
    "check_parameters",
    "relative_error",
    "ShapeError",
    "NonFiniteError",
    "BackwardError",
    "NonDeterministicError",
]
