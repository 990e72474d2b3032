"""Numpy-backed neural network substrate: autodiff tensors, layers, optimizer."""

from .tensor import (
    Tensor,
    add,
    amax,
    batch_norm,
    clip,
    concat,
    conv2d,
    conv_transpose2d,
    default_dtype,
    div,
    exp,
    log,
    log_softmax,
    masked_fill,
    matmul,
    mul,
    no_grad,
    pow_const,
    relu,
    narrow,
    reshape,
    scatter_columns,
    set_default_dtype,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    stack,
    segment_max,
    stack_max,
    sub,
    tabs,
    tmean,
    transpose,
    tsum,
    where_mask,
)
from .layers import (
    BatchNorm,
    Conv2d,
    ConvTranspose2d,
    Linear,
    ModuleList,
    Module,
    Parameter,
    kaiming_uniform,
)
from .optim import Adam
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Adam",
    "BatchNorm",
    "Conv2d",
    "ConvTranspose2d",
    "Linear",
    "ModuleList",
    "Module",
    "Parameter",
    "Tensor",
    "add",
    "amax",
    "batch_norm",
    "clip",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "default_dtype",
    "div",
    "exp",
    "kaiming_uniform",
    "load_checkpoint",
    "log",
    "log_softmax",
    "masked_fill",
    "matmul",
    "mul",
    "no_grad",
    "pow_const",
    "relu",
    "narrow",
    "reshape",
    "save_checkpoint",
    "scatter_columns",
    "set_default_dtype",
    "sigmoid",
    "softmax",
    "softplus",
    "sqrt",
    "stack",
    "segment_max",
    "stack_max",
    "sub",
    "tabs",
    "tmean",
    "transpose",
    "tsum",
    "where_mask",
]
