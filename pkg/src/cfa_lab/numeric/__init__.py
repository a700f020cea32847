"""Numeric core: grids, reverse-mode autodiff, optimizer, gradient checker."""

from .grid import (
    Grid,
    add,
    as_grid,
    bce_logits,
    channel_pad,
    channel_slice,
    check_finite,
    constant,
    div,
    exp,
    gelu,
    grad_enabled,
    huber,
    log,
    log_softmax,
    make_op,
    matmul,
    maximum,
    mean_all,
    mul,
    no_grad,
    reshape,
    scale,
    sigmoid,
    softmax,
    sqrt,
    sub,
    sum_all,
    sum_axis,
    transpose,
)
from .gradcheck import grad_check
from .ops import bilinear_sample, conv2d, depthwise_conv2d, layer_norm, resize_bilinear
from .optim import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, ParamStore, adam_step

__all__ = [
    "Grid",
    "ParamStore",
    "adam_step",
    "add",
    "as_grid",
    "bce_logits",
    "bilinear_sample",
    "channel_pad",
    "channel_slice",
    "check_finite",
    "constant",
    "conv2d",
    "depthwise_conv2d",
    "div",
    "exp",
    "gelu",
    "grad_check",
    "grad_enabled",
    "huber",
    "layer_norm",
    "log",
    "log_softmax",
    "make_op",
    "matmul",
    "maximum",
    "mean_all",
    "mul",
    "no_grad",
    "reshape",
    "resize_bilinear",
    "scale",
    "sigmoid",
    "softmax",
    "sqrt",
    "sub",
    "sum_all",
    "sum_axis",
    "transpose",
    "ADAM_BETA1",
    "ADAM_BETA2",
    "ADAM_EPS",
]
