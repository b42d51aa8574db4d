"""Reverse-mode automatic differentiation on an explicit operation tape."""

from .core import (
    AutodiffError,
    ContractError,
    GradientMap,
    SecondOrderUnavailable,
    ShapeError,
    Tape,
    Tensor,
    UnsupportedOperation,
    as_tensor,
    backward,
    grad,
    grad_of_grad,
    op_kinds,
    record,
)
from .ops import (
    add,
    broadcast_to,
    concat,
    conv1d,
    cross_entropy,
    div,
    exp,
    frobenius_sq,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scalar_mul,
    slice_,
    softmax,
    sort,
    sqrt,
    squared_error,
    sub,
    take_along,
    transpose,
    var,
)
from .ops import sum as sum_  # noqa: F401

__all__ = [
    "AutodiffError", "ContractError", "GradientMap", "SecondOrderUnavailable", "ShapeError",
    "Tape", "Tensor", "UnsupportedOperation", "as_tensor", "backward", "grad", "grad_of_grad",
    "op_kinds", "record", "add", "broadcast_to", "concat", "conv1d", "cross_entropy", "div",
    "exp", "frobenius_sq", "log", "log_softmax", "matmul", "mean", "mul", "relu", "reshape",
    "scalar_mul", "slice_", "softmax", "sort", "sqrt", "squared_error", "sub", "sum_",
    "take_along", "transpose", "var",
]
