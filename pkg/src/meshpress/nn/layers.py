"""Dense volumetric layers with hand-written backward passes.

Tensors are plain ``numpy`` arrays laid out (D, H, W, C). Every forward
function returns ``(output, cache)`` and its ``*_backward`` partner takes
the upstream gradient plus that cache. Arithmetic follows the input dtype,
so float64 inputs give float64 gradients for finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..quant import QuantSpec, quantize


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Conv3Spec:
    kernel: int
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel size must be a positive odd integer")

    @property
    def pad(self) -> int:
        return (self.kernel - 1) // 2

    @property
    def weight_shape(self):
        k = self.kernel
        return (k, k, k, self.in_channels, self.out_channels)

    @property
    def n_params(self) -> int:
        k = self.kernel
        return k * k * k * self.in_channels * self.out_channels + self.out_channels


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv3d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, spec: Conv3Spec):
    """Stride-1 'same' cross-correlation."""
    if x.ndim != 4 or x.shape[3] != spec.in_channels:
        raise ShapeError(f"conv3d expects {spec.in_channels} input channels, got shape {x.shape}")
    if weights.shape != spec.weight_shape or bias.shape != (spec.out_channels,):
        raise ShapeError("conv3d weight/bias shape does not match spec")
    d, h, w, _ = x.shape
    k, p = spec.kernel, spec.pad
    xp = np.pad(x, ((p, p), (p, p), (p, p), (0, 0))) if p else x
    out = np.empty((d * h * w, spec.out_channels), dtype=np.result_type(x, weights))
    out[...] = bias
    for a in range(k):
        for b in range(k):
            for c in range(k):
                patch = xp[a : a + d, b : b + h, c : c + w].reshape(-1, spec.in_channels)
                out += patch @ weights[a, b, c]
    return out.reshape(d, h, w, spec.out_channels), (xp, weights, spec, x.shape)


def conv3d_backward(grad: np.ndarray, cache):
    """Returns (d input, d weights, d bias)."""
    xp, weights, spec, in_shape = cache
    d, h, w, _ = in_shape
    k, p = spec.kernel, spec.pad
    g = grad.reshape(-1, spec.out_channels)
    gxp = np.zeros_like(xp, dtype=np.result_type(grad, xp))
    gw = np.empty_like(weights, dtype=np.result_type(grad, weights))
    for a in range(k):
        for b in range(k):
            for c in range(k):
                patch = xp[a : a + d, b : b + h, c : c + w].reshape(-1, spec.in_channels)
                gw[a, b, c] = patch.T @ g
                gxp[a : a + d, b : b + h, c : c + w] += (g @ weights[a, b, c].T).reshape(
                    d, h, w, spec.in_channels
                )
    gx = gxp[p : p + d, p : p + h, p : p + w] if p else gxp
    return gx, gw, g.sum(axis=0)


# ---------------------------------------------------------------------------
# pixel shuffle
# ---------------------------------------------------------------------------

def pixel_shuffle3d(x: np.ndarray, scale: int) -> np.ndarray:
    """Channel-to-space: out[s*d+i, s*h+j, s*w+l, c] = x[d, h, w, c*s^3 + i*s^2 + j*s + l]."""
    d, h, w, ch = x.shape
    s3 = scale**3
    if ch % s3:
        raise ShapeError(f"{ch} channels not divisible by scale^3 = {s3}")
    c_out = ch // s3
    y = x.reshape(d, h, w, c_out, scale, scale, scale)
    y = y.transpose(0, 4, 1, 5, 2, 6, 3)
    return y.reshape(d * scale, h * scale, w * scale, c_out)


def pixel_unshuffle3d(y: np.ndarray, scale: int) -> np.ndarray:
    """Exact inverse of :func:`pixel_shuffle3d`; also its backward pass."""
    sd, sh, sw, c_out = y.shape
    if sd % scale or sh % scale or sw % scale:
        raise ShapeError("spatial dims not divisible by scale")
    d, h, w = sd // scale, sh // scale, sw // scale
    x = y.reshape(d, scale, h, scale, w, scale, c_out)
    x = x.transpose(0, 2, 4, 6, 1, 3, 5)
    return x.reshape(d, h, w, c_out * scale**3)


pixel_shuffle3d_backward = pixel_unshuffle3d


# ---------------------------------------------------------------------------
# activation
# ---------------------------------------------------------------------------

# a Python float, so float32 inputs stay float32
_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: np.ndarray):
    """Tanh-approximated GELU."""
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    return 0.5 * x * (1.0 + th), (x, th)


def gelu_backward(grad: np.ndarray, cache) -> np.ndarray:
    x, th = cache
    d_inner = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
    return grad * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner)


activation = gelu
activation_backward = gelu_backward


# ---------------------------------------------------------------------------
# quantization and clamping with straight-through gradients
# ---------------------------------------------------------------------------

def ste_quantize(x: np.ndarray, spec: QuantSpec):
    return quantize(x, spec), (x >= spec.a) & (x <= spec.b)


def ste_quantize_backward(grad: np.ndarray, cache) -> np.ndarray:
    return grad * cache


def ste_clamp(x: np.ndarray, lo: float = -1.0, hi: float = 1.0):
    return np.clip(x, lo, hi), (x >= lo) & (x <= hi)


ste_clamp_backward = ste_quantize_backward
