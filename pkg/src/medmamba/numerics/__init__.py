"""Dense-array autodiff core, counter-based RNG, and gradient verification."""

from .gradcheck import GradCheckReport, grad_check
from .ops import (BnState, Tape, Tensor, add, astensor, batchnorm1d, concat,
                  conv1d, debug_nonfinite, div, dwconv1d, elementwise, exp,
                  expm1_over_x, flip, gelu, getitem, layernorm, log, matmul,
                  mean_, mul, neg, reshape, sigmoid, silu, softmax, softplus,
                  sqrt, sub, sum_, swapaxes, tanh, transpose)
from .rng import Rng

__all__ = [
    "BnState", "GradCheckReport", "Rng", "Tape", "Tensor", "add", "astensor",
    "batchnorm1d", "concat", "conv1d", "debug_nonfinite", "div", "dwconv1d",
    "elementwise", "exp", "expm1_over_x", "flip", "gelu", "getitem",
    "grad_check", "layernorm", "log", "matmul", "mean_", "mul", "neg",
    "reshape", "sigmoid", "silu", "softmax", "softplus", "sqrt", "sub",
    "sum_", "swapaxes", "tanh", "transpose",
]
