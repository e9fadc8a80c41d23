"""Numerical substrate: tensors with reverse-mode autodiff, convolution, BN, SVD."""

from .._kernels import BACKEND
from ._tensor import DEFAULT_DTYPE, Tensor, concat, is_grad_enabled, no_grad, stack, tensor
from .functional import (
    BatchNormState,
    avg_pool2d,
    batch_norm,
    conv2d,
    conv_output_size,
    cross_entropy,
    flatten,
    gumbel_softmax,
    kl_div,
    linear,
    log_softmax,
    max_pool2d,
    mse_loss,
    relu,
    softmax,
)
from .linalg import SvdResult, svd
from .optim import SGD, Adam, ReduceOnPlateau

__all__ = [
    "BACKEND",
    "DEFAULT_DTYPE",
    "Adam",
    "BatchNormState",
    "ReduceOnPlateau",
    "SGD",
    "SvdResult",
    "Tensor",
    "avg_pool2d",
    "batch_norm",
    "concat",
    "conv2d",
    "conv_output_size",
    "cross_entropy",
    "flatten",
    "gumbel_softmax",
    "is_grad_enabled",
    "kl_div",
    "linear",
    "log_softmax",
    "max_pool2d",
    "mse_loss",
    "no_grad",
    "relu",
    "softmax",
    "stack",
    "svd",
    "tensor",
]
