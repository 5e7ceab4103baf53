"""Resolution-robust vision transformer on a minimal autodiff tensor core."""

from .tensor import (
    Tensor,
    bilinear_sample,
    constant,
    cross_entropy,
    finite_diff_grad,
    gelu,
    layer_norm,
    matmul,
    no_grad,
    parameter,
    softmax_lastdim,
)

__all__ = [
    "Tensor",
    "bilinear_sample",
    "constant",
    "cross_entropy",
    "finite_diff_grad",
    "gelu",
    "layer_norm",
    "matmul",
    "no_grad",
    "parameter",
    "softmax_lastdim",
]

__version__ = "0.1.0"
