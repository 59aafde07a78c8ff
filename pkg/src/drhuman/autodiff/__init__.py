"""Minimal reverse-mode automatic differentiation on float64 numpy arrays."""
from . import checkpoint, ops
from .gradcheck import GradcheckError, finite_diff_check, numeric_grad, relative_error
from .ops import (abs, add, broadcast_to, clamp, concat, conv2d, cos, div, elementwise, exp, getitem,
                  l1_norm, log, matmul, mean, mul, neg, reduce, relu, reshape, scale,
                  sigmoid, sin, spmm, sqrt, square, stack, sub, sum, take_rows, tanh,
                  transpose, upsample_nearest)
from .tensor import (DimensionError, Tape, TapeError, Tensor, as_tensor, get_tape,
                     grad_enabled, make_op, no_grad, reset_tape, session)

__all__ = [
    "Tensor", "Tape", "TapeError", "broadcast_to", "DimensionError", "GradcheckError", "as_tensor", "make_op",
    "get_tape", "reset_tape", "no_grad", "session", "grad_enabled", "finite_diff_check",
    "numeric_grad", "relative_error", "checkpoint", "ops", "abs", "add", "clamp", "concat",
    "conv2d", "cos", "div", "elementwise", "exp", "getitem", "l1_norm", "log", "matmul",
    "mean", "mul", "neg", "reduce", "relu", "reshape", "scale", "sigmoid", "sin", "spmm",
    "sqrt", "square", "stack", "sub", "sum", "take_rows", "tanh", "transpose",
    "upsample_nearest",
]
