"""Minimal reverse-mode differentiable operator set for 1-D conv networks."""

from .autograd import Tensor, as_tensor, default_dtype, get_default_dtype, grad_enabled, no_grad
from .ops import (
    BatchNormState,
    add,
    batchnorm,
    clamp_min,
    concat,
    concat_channels,
    conv1d,
    cross_entropy,
    div,
    exp,
    l2_normalize,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    sub,
    tanh,
    time_mean,
    time_stats,
    transpose,
    where,
)
from .ops import sum as reduce_sum
from .params import ParamTree

__all__ = [
    "BatchNormState", "ParamTree", "Tensor", "add", "as_tensor", "batchnorm", "clamp_min",
    "concat", "concat_channels", "conv1d", "cross_entropy", "default_dtype", "div", "exp",
    "get_default_dtype", "grad_enabled", "l2_normalize", "linear", "log", "log_softmax",
    "matmul", "mean", "mul", "no_grad", "power", "reduce_sum", "relu", "reshape", "sigmoid",
    "softmax", "sqrt", "sub", "tanh", "time_mean", "time_stats", "transpose", "where",
]
