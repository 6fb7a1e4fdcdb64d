"""Minimal reverse-mode automatic differentiation over float64 NumPy arrays."""

from mitml.autodiff import ops
from mitml.autodiff.gradcheck import GradCheckReport, grad_check
from mitml.autodiff.serialize import FormatError, read_tensor, tensor_from_bytes, tensor_to_bytes
from mitml.autodiff.tensor import ShapeError, Tensor, grad_enabled, no_grad

__all__ = [
    "FormatError",
    "GradCheckReport",
    "ShapeError",
    "Tensor",
    "grad_check",
    "grad_enabled",
    "no_grad",
    "ops",
    "read_tensor",
    "tensor_from_bytes",
    "tensor_to_bytes",
]
