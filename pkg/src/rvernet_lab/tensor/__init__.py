"""Minimal reverse-mode autodiff engine and the primitives the models need."""
from .checkpoint import load_checkpoint, save_checkpoint
from .engine import (DTYPES, ConfigurationError, ContractError, DimensionError,
                     Tensor, add, broadcast_rows, concat, exp, gelu, getitem,
                     log, log_softmax, matmul, mean, mul, neg, power, relu,
                     reshape, softmax, transpose, tsum)
from .gradcheck import grad_check
from .kernels import BACKEND as KERNEL_BACKEND
from .ops import (conv2d, cross_entropy, cross_entropy_label_smoothing,
                  global_avg_pool, layer_norm, linear,
                  multi_head_self_attention, pad2d, relu6)

__all__ = [
    "DTYPES", "ConfigurationError", "ContractError", "DimensionError",
    "KERNEL_BACKEND", "Tensor", "add", "broadcast_rows", "concat", "conv2d",
    "cross_entropy", "cross_entropy_label_smoothing", "exp", "gelu",
    "getitem", "global_avg_pool", "grad_check", "layer_norm", "linear",
    "load_checkpoint", "log", "log_softmax", "matmul", "mean", "mul",
    "multi_head_self_attention", "neg", "pad2d", "power", "relu", "relu6",
    "reshape", "save_checkpoint", "softmax", "transpose", "tsum",
]
