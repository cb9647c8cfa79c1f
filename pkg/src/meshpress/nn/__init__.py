"""Minimal dense-tensor layers for the auto-decoder."""

from .adam import AdamState, adam_step
from .layers import (
    Conv3Spec,
    ShapeError,
    activation,
    activation_backward,
    conv3d,
    conv3d_backward,
    gelu,
    gelu_backward,
    pixel_shuffle3d,
    pixel_shuffle3d_backward,
    pixel_unshuffle3d,
    ste_clamp,
    ste_clamp_backward,
    ste_quantize,
    ste_quantize_backward,
)
from .ssim import ssim3d

__all__ = [
    "AdamState", "adam_step", "Conv3Spec", "ShapeError", "activation", "activation_backward",
    "conv3d", "conv3d_backward", "gelu", "gelu_backward", "pixel_shuffle3d",
    "pixel_shuffle3d_backward", "pixel_unshuffle3d", "ste_clamp", "ste_clamp_backward",
    "ste_quantize", "ste_quantize_backward", "ssim3d",
]
