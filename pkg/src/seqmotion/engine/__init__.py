"""Minimal reverse-mode engine: tensors, layers, Adam, checkpoints."""

from .checkpoint import (BLOB_SUFFIX, MANIFEST_SUFFIX, CheckpointError,
                         checkpoint_digest, load_arrays, save_arrays)
from .gradcheck import check_gradients, numeric_gradient, relative_error
from .ops import (avg_pool2d, box_filter2d, conv1d_dilated, conv2d,
                  conv2d_transpose, dense, grid_sample)
from .optim import ParamStore, adam_step
from .tensor import (Tensor, add, apply_matrix, as_tensor, clamp_max,
                     clamp_min, concat, div, exp, leaky_relu, matmul, mean,
                     mul, reshape, square, sum_, take, transpose)

__all__ = [
    "Tensor", "ParamStore", "adam_step",
    "add", "mul", "div", "square", "exp", "leaky_relu", "clamp_min", "clamp_max",
    "sum_", "mean", "reshape", "transpose", "take", "concat", "matmul",
    "apply_matrix", "as_tensor",
    "conv2d", "conv2d_transpose", "conv1d_dilated", "dense", "grid_sample",
    "box_filter2d", "avg_pool2d",
    "save_arrays", "load_arrays", "checkpoint_digest", "CheckpointError",
    "MANIFEST_SUFFIX", "BLOB_SUFFIX",
    "check_gradients", "numeric_gradient", "relative_error",
]
