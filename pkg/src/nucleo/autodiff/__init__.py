"""Minimal reverse-mode differentiation on numpy arrays."""

from nucleo.autodiff.checkpoint import CheckpointError, load_checkpoint, read_meta, save_checkpoint
from nucleo.autodiff.gradcheck import grad_check, relative_error
from nucleo.autodiff.losses import sigmoid_bce, smooth_l1, softmax_cross_entropy
from nucleo.autodiff.nn import Conv2d, ConvTranspose2d, Linear, Module
from nucleo.autodiff.ops import (
    add,
    bilinear_resize,
    concat,
    conv2d,
    conv_transpose2d,
    linear,
    max_pool2d,
    relu,
    reshape,
    scale,
    take,
    transpose,
    weighted_sum,
)
from nucleo.autodiff.optim import global_grad_norm, sgd_momentum_step
from nucleo.autodiff.tensor import STAGE_TAGS, Parameter, Tape, Tensor, corrupt_backward

__all__ = [
    "STAGE_TAGS",
    "CheckpointError",
    "Conv2d",
    "ConvTranspose2d",
    "Linear",
    "Module",
    "Parameter",
    "Tape",
    "Tensor",
    "add",
    "bilinear_resize",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "corrupt_backward",
    "global_grad_norm",
    "grad_check",
    "linear",
    "load_checkpoint",
    "max_pool2d",
    "read_meta",
    "relative_error",
    "relu",
    "reshape",
    "save_checkpoint",
    "scale",
    "sgd_momentum_step",
    "sigmoid_bce",
    "smooth_l1",
    "softmax_cross_entropy",
    "take",
    "transpose",
    "weighted_sum",
]
