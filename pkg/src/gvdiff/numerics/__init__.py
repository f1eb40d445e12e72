"""Minimal differentiable numeric kernel used by every other module."""
from gvdiff.numerics.ops import (
    MLPWeights,
    area_resize,
    attention_backward,
    attention_forward,
    attention_weights,
    fourier_embed,
    gaussian_blur_2d,
    gaussian_kernel_1d,
    gelu,
    gelu_backward,
    layer_norm,
    layer_norm_backward,
    layer_norm_forward,
    linear,
    linear_backward,
    mlp_backward,
    mlp_forward,
    scaled_dot_attention,
    sigmoid,
    softmax,
    softmax_backward,
)
from gvdiff.numerics.params import Parameter
from gvdiff.numerics.rng import RngStream
from gvdiff.numerics.gradcheck import DiffOp, grad_check, register_op

__all__ = [
    "MLPWeights", "Parameter", "RngStream", "DiffOp",
    "area_resize", "attention_backward", "attention_forward", "attention_weights",
    "fourier_embed", "gaussian_blur_2d", "gaussian_kernel_1d", "gelu", "gelu_backward",
    "grad_check", "layer_norm", "layer_norm_backward", "layer_norm_forward", "linear",
    "linear_backward", "mlp_backward", "mlp_forward", "register_op",
    "scaled_dot_attention", "sigmoid", "softmax", "softmax_backward",
]
