"""Small reverse-mode differentiable kernel: tensors, layers, losses, Adam."""
from . import container, functional
from .functional import (
    ShapeError,
    add,
    batchnorm,
    concat,
    conv2d,
    dense,
    mean_all,
    mean_pool2d,
    mse,
    mul,
    relu,
    reshape,
    scale,
    softmax_cross_entropy,
    straight_through,
    sum_all,
    tanh,
    transpose,
)
from .gradcheck import GradCheckReport, grad_check, relative_error
from .layers import BatchNorm, Conv2d, Dense, Module, glorot_uniform
from .optim import Adam, OptimizerState
from .tensor import Parameter, Tensor, get_default_dtype, precision, set_default_dtype

__all__ = [
    "Adam", "BatchNorm", "Conv2d", "Dense", "GradCheckReport", "Module", "OptimizerState",
    "Parameter", "ShapeError", "Tensor", "add", "batchnorm", "concat", "container", "conv2d",
    "dense", "functional", "get_default_dtype", "glorot_uniform", "grad_check", "mean_all",
    "mean_pool2d", "mse", "mul", "precision", "relative_error", "relu", "reshape", "scale",
    "set_default_dtype", "softmax_cross_entropy", "straight_through", "sum_all", "tanh",
    "transpose",
]
