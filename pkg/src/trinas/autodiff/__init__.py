"""Define-by-run reverse-mode autodiff on numpy, float64 throughout."""

from .tensor import (
    Tensor,
    NonFiniteError,
    ShapeError,
    set_default_dtype,
    get_default_dtype,
    set_finite_checks,
    astensor,
    constant,
    parameter,
    add,
    sub,
    mul,
    neg,
    scale,
    matmul,
    reshape,
    transpose,
    concat,
    row,
    gather_rows,
    mean,
    tsum,
    relu,
    tanh,
    sigmoid,
    exp,
    log,
    softmax,
    log_softmax,
    cross_entropy,
    bce_with_logits,
    weighted_sum,
    backward,
)
from .conv import (
    conv2d,
    depthwise_conv2d,
    max_pool,
    avg_pool,
    batch_norm,
    upsample2x,
    global_avg_pool,
)
from .collections import WeightSet, GradientMap, gradients
from .hvp import hvp, ZeroDirectionError

__all__ = [
    "Tensor", "NonFiniteError", "ShapeError",
    "set_default_dtype", "get_default_dtype", "set_finite_checks",
    "astensor", "constant", "parameter",
    "add", "sub", "mul", "neg", "scale", "matmul",
    "reshape", "transpose", "concat", "row", "gather_rows",
    "mean", "tsum",
    "relu", "tanh", "sigmoid", "exp", "log",
    "softmax", "log_softmax", "cross_entropy", "bce_with_logits",
    "weighted_sum", "backward",
    "conv2d", "depthwise_conv2d", "max_pool", "avg_pool",
    "batch_norm", "upsample2x", "global_avg_pool",
    "WeightSet", "GradientMap", "gradients",
    "hvp", "ZeroDirectionError",
]
