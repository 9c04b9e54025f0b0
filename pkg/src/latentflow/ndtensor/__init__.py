"""Reverse-mode autodiff substrate over dense numpy arrays."""
from latentflow.ndtensor.tensor import (
    Tape,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    debug_enabled,
    get_default_dtype,
    no_grad,
    precision,
    reset_tape,
    set_debug,
    set_default_dtype,
)
from latentflow.ndtensor.ops import (
    abs,
    add,
    bilinear_sample,
    broadcast_to,
    concat,
    conv2d,
    cos,
    div,
    exp,
    getitem,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    neg,
    pad,
    pow_scalar,
    relu,
    reshape,
    sigmoid,
    sin,
    softmax_lastdim,
    sqrt,
    stack,
    sub,
    sum,
    tanh,
    transpose,
    where,
)
from latentflow.ndtensor.nn import MLP, Conv2d, LayerNorm, Linear, Module, Parameter

__all__ = [
    "Tape", "Tensor", "as_tensor", "backward", "current_tape", "debug_enabled",
    "get_default_dtype", "no_grad", "precision", "reset_tape", "set_debug", "set_default_dtype",
    "abs", "add", "bilinear_sample", "broadcast_to", "concat", "conv2d", "cos", "div", "exp", "getitem",
    "layer_norm", "log", "matmul", "mean", "mul", "neg", "pad", "pow_scalar", "relu",
    "reshape", "sigmoid", "sin", "softmax_lastdim", "sqrt", "stack", "sub", "sum", "tanh",
    "transpose", "where",
    "MLP", "Conv2d", "LayerNorm", "Linear", "Module", "Parameter",
]
