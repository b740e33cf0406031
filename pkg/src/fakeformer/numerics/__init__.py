from .gradcheck import GradCheckReport, gradient_check
from .tensor import (
    DimensionError,
    Tape,
    Tensor,
    active_tape,
    add,
    as_tensor,
    backward,
    batch_norm,
    clamp,
    concat,
    conv2d,
    div,
    exp,
    gelu,
    getitem,
    layer_norm,
    log,
    matmul,
    max_pool_patches,
    mean,
    mul,
    neg,
    permute,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sub,
    sum_,
    transpose,
)

__all__ = [
    "DimensionError",
    "GradCheckReport",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "as_tensor",
    "backward",
    "batch_norm",
    "clamp",
    "concat",
    "conv2d",
    "div",
    "exp",
    "gelu",
    "getitem",
    "gradient_check",
    "layer_norm",
    "log",
    "matmul",
    "max_pool_patches",
    "mean",
    "mul",
    "neg",
    "permute",
    "power",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "softplus",
    "sub",
    "sum_",
    "transpose",
]
