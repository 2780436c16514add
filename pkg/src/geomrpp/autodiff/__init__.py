"""Reverse-mode automatic differentiation over float64 numpy arrays."""
from . import kinks
from . import ops
from .check import fd_conditioning, grad_check
from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .ops import (batchnorm2d, concat_rows, conv2d, gather_rows, linear, maxpool2d, relu,
                  segment_sum, softmax_cross_entropy, ssp)
from .optim import Adam, ReduceLROnPlateau
from .tensor import Parameter, Tensor, no_grad

__all__ = [
    "Adam", "fd_conditioning", "BatchNorm2d", "Conv2d", "Linear", "Module", "Parameter", "ReduceLROnPlateau",
    "Tensor", "batchnorm2d", "concat_rows", "conv2d", "gather_rows", "grad_check", "kinks",
    "linear", "load_into", "maxpool2d", "no_grad", "ops", "read_checkpoint", "save_checkpoint", "relu", "segment_sum", "softmax_cross_entropy", "ssp",
]
