"""Volumetric SSIM with an analytic gradient.

Statistics use a separable 7^3 Gaussian window (sigma 1.5) applied in
'valid' mode, per channel; the SSIM map is averaged over positions and
channels.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .layers import ShapeError

WINDOW = 7
SIGMA = 1.5


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    y = x
    for axis in range(3):
        y = correlate1d(y, g, axis=axis, mode="constant", cval=0.0)
    return y[r:-r, r:-r, r:-r] if r else y


def _filter_valid_adjoint(y: np.ndarray, g: np.ndarray, full_shape) -> np.ndarray:
    # the symmetric window makes zero-padded same-size filtering self-adjoint
    r = len(g) // 2
    x = np.zeros(full_shape, dtype=y.dtype)
    x[r : full_shape[0] - r, r : full_shape[1] - r, r : full_shape[2] - r] = y
    for axis in range(3):
        x = correlate1d(x, g, axis=axis, mode="constant", cval=0.0)
    return x


def ssim3d(x: np.ndarray, y: np.ndarray, data_range: float = 2.0, with_grad: bool = True):
    """Mean SSIM of two (D, H, W, C) volumes and its gradient w.r.t. ``x``.

    Returns ``(value, grad)``; ``grad`` is None when ``with_grad`` is false.
    """
    if x.shape != y.shape:
        raise ShapeError(f"ssim3d shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape[:3]) < WINDOW:
        raise ShapeError(f"volume smaller than the {WINDOW}^3 SSIM window")
    dtype = np.result_type(x, y)
    g = gaussian_window().astype(dtype)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    mx = _filter_valid(x, g)
    my = _filter_valid(y, g)
    pxx = _filter_valid(x * x, g)
    pyy = _filter_valid(y * y, g)
    pxy = _filter_valid(x * y, g)
    vx = pxx - mx * mx
    vy = pyy - my * my
    cxy = pxy - mx * my

    a1 = 2.0 * mx * my + c1
    a2 = 2.0 * cxy + c2
    b1 = mx * mx + my * my + c1
    b2 = vx + vy + c2
    smap = (a1 * a2) / (b1 * b2)
    value = float(smap.mean())
    if not with_grad:
        return value, None

    n = smap.size
    d_mx = smap * (2.0 * my / a1 - 2.0 * my / a2 - 2.0 * mx / b1 + 2.0 * mx / b2) / n
    d_pxy = smap * 2.0 / a2 / n
    d_pxx = -smap / b2 / n
    grad = (
        _filter_valid_adjoint(d_mx, g, x.shape)
        + 2.0 * x * _filter_valid_adjoint(d_pxx, g, x.shape)
        + y * _filter_valid_adjoint(d_pxy, g, x.shape)
    )
    return value, grad.astype(dtype, copy=False)
