"""Minimal reverse-mode differentiation over 4-D tensors."""

from .adam import AdamState, NonFiniteError, adam_step
from .gradcheck import GradCheckResult, ProbeReport, check_gradients, probe_gradients, relative_error
from .ops import (
    add,
    concat_channels,
    conv2d,
    conv_output_size,
    invert_scattering,
    mean_all,
    mean_spatial,
    mul,
    record_kinks,
    relu,
    scale,
    scale_channel,
    sigmoid,
    slice_channels,
    smooth_l1_elementwise,
    square,
    sub,
    transposed_conv2d,
)
from .tensor import ShapeError, Tensor, TapeNode, backward, is_grad_enabled, no_grad, zero_grads

__all__ = [
    "AdamState",
    "GradCheckResult",
    "NonFiniteError",
    "ProbeReport",
    "ShapeError",
    "TapeNode",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "check_gradients",
    "concat_channels",
    "conv2d",
    "conv_output_size",
    "invert_scattering",
    "is_grad_enabled",
    "mean_all",
    "mean_spatial",
    "mul",
    "no_grad",
    "probe_gradients",
    "record_kinks",
    "relative_error",
    "relu",
    "scale",
    "scale_channel",
    "sigmoid",
    "slice_channels",
    "smooth_l1_elementwise",
    "square",
    "sub",
    "transposed_conv2d",
    "zero_grads",
]
