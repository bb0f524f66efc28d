"""Self-contained float64 tensor core: taped autodiff, conv kernels,
spectrum magnitudes, binary serialization, and the gradient checker."""

from .conv import (avg_pool2d, conv2d, conv_out_size, global_avg_pool,
                   upsample2x_bilinear)
from .core import (Tape, Tensor, active_tape, add, as_tensor, backward,
                   concat, div, exp, gather, gelu, layer_norm, log, matmul,
                   mean, mul, narrow, neg, ones, powc, reshape, scatter_rows,
                   set_finite_checks, sigmoid, softmax, softplus, sub, sum_,
                   transpose, variance, where, zeros)
from .gradcheck import GradCheckReport, finite_difference_check
from .serialize import load_tensors, read_record, save_tensors, write_record
from .spectral import rfft_amplitudes

__all__ = [
    "Tensor", "Tape", "active_tape", "backward", "set_finite_checks",
    "as_tensor", "zeros", "ones",
    "add", "sub", "mul", "div", "neg", "exp", "log", "powc",
    "sigmoid", "softplus", "gelu", "where",
    "sum_", "mean", "variance",
    "reshape", "transpose", "concat", "narrow", "gather", "scatter_rows",
    "matmul", "softmax", "layer_norm",
    "conv2d", "conv_out_size", "avg_pool2d", "global_avg_pool",
    "upsample2x_bilinear",
    "rfft_amplitudes",
    "write_record", "read_record", "save_tensors", "load_tensors",
    "GradCheckReport", "finite_difference_check",
]
