"""Complex-tensor algebra with reverse-mode automatic differentiation."""

from .tensor import (
    ComplexTensor, Parameter, Tape, no_grad, is_grad_enabled, backward,
    add, sub, neg, mul, scale, conj, real, imag, make_complex,
    cabs, crelu, exp_r, log_r, sqrt_r, rdiv, clip_r,
    complex_matmul, reshape, transpose, getitem, concat,
    pad_constant, pad_reflect, reflect_indices,
    tsum, tmean, stop_gradient, softmax_r,
)
from .functional import (
    complex_conv2d, complex_conv_transpose2d, complex_depthwise_conv1d,
    frame, overlap_add,
)
from .gradcheck import grad_check, DeterminismError
from .init import glorot_complex, zeros_param

__all__ = [
    "ComplexTensor", "Parameter", "Tape", "no_grad", "is_grad_enabled", "backward",
    "add", "sub", "neg", "mul", "scale", "conj", "real", "imag",
    "make_complex", "cabs", "crelu", "exp_r", "log_r", "sqrt_r", "rdiv",
    "clip_r", "complex_matmul", "reshape", "transpose", "getitem", "concat",
    "pad_constant", "pad_reflect", "reflect_indices", "tsum", "tmean",
    "stop_gradient", "softmax_r",
    "complex_conv2d", "complex_conv_transpose2d", "complex_depthwise_conv1d",
    "frame", "overlap_add",
    "grad_check", "DeterminismError",
    "glorot_complex", "zeros_param",
]
