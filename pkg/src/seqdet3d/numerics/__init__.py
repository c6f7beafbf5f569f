"""Dense array arithmetic with reverse-mode gradients, Adam, and checkpoints."""

from .tensor import (
    Tensor,
    atan2,
    bilinear_sample,
    clip_value,
    concat,
    constant,
    conv2d_3x3,
    exp,
    huber,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    pow_const,
    relu,
    reshape,
    softmax,
    take_col,
    take_per_row,
    take_rows,
    tsum,
)
from .optim import ParamStore, adam_step, cosine_lr
from .gradcheck import grad_check
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Tensor",
    "atan2",
    "bilinear_sample",
    "clip_value",
    "concat",
    "constant",
    "conv2d_3x3",
    "exp",
    "huber",
    "linear",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "pow_const",
    "relu",
    "reshape",
    "softmax",
    "take_col",
    "take_per_row",
    "take_rows",
    "tsum",
    "ParamStore",
    "adam_step",
    "cosine_lr",
    "grad_check",
    "load_checkpoint",
    "save_checkpoint",
]
