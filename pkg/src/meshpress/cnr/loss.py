"""Regression loss between decoded and target TSDF-Def tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..nn.layers import ShapeError
from ..nn.ssim import ssim3d
from ..quant import QuantSpec
from ..rgr.grid import TRUNCATION_CELLS, TsdfDefTensor

# grid points within two cells of the surface, in normalized TSDF units
DEFAULT_MASK_TAU = 2.0 / TRUNCATION_CELLS


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 5.0
    lambda2: float = 10.0
    tau: float = DEFAULT_MASK_TAU
    epochs: int = 400
    lr: float = 1e-3
    feature_quant: QuantSpec = field(default_factory=QuantSpec)
    param_quant: QuantSpec = field(default_factory=QuantSpec)
    seed: int = 0
    feature_std: float = 0.01
    lr_schedule: str = "constant"  # or "cosine": decay from lr to 0 over the epochs

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown learning-rate schedule '{self.lr_schedule}'")


def _as_array(t) -> np.ndarray:
    return t.data if isinstance(t, TsdfDefTensor) else np.asarray(t)


def surface_mask(target: np.ndarray, tau: float) -> np.ndarray:
    """Boolean K^3 mask of grid points near the surface.

    ``tau >= 1`` selects every point, including the saturated ones at
    exactly +-1, so the masked term then coincides with the plain L1 term.
    """
    if tau >= 1.0:
        return np.ones(target.shape[:3], dtype=bool)
    return np.abs(target[..., 0]) < tau


def regression_loss(
    predicted,
    target,
    cfg: Optional[TrainConfig] = None,
    with_grad: bool = True,
    *,
    lambda1: Optional[float] = None,
    lambda2: Optional[float] = None,
    tau: Optional[float] = None,
):
    """L1 + masked L1 + SSIM loss; returns ``(loss, grad_wrt_predicted, parts)``.

    ``parts`` holds the three unweighted terms (``l1``, ``masked``, ``ssim``).
    Keyword weights override those of ``cfg``.
    """
    cfg = cfg or TrainConfig()
    l1w = cfg.lambda1 if lambda1 is None else lambda1
    l2w = cfg.lambda2 if lambda2 is None else lambda2
    tau = cfg.tau if tau is None else tau
    p = _as_array(predicted)
    t = _as_array(target)
    if p.shape != t.shape:
        raise ShapeError(f"predicted {p.shape} and target {t.shape} differ")

    diff = p - t
    sign = np.sign(diff)
    l1 = float(np.abs(diff).mean())
    mask = surface_mask(t, tau)
    n_mask = int(mask.sum()) * t.shape[-1]
    masked = float(np.abs(diff[mask]).sum() / n_mask) if n_mask else 0.0

    if l2w != 0.0:
        s, gs = ssim3d(p, t, with_grad=with_grad)
    else:
        s, gs = 1.0, None
    loss = l1 + l1w * masked + l2w * (1.0 - s)
    parts = {"l1": l1, "masked": masked, "ssim": s}
    if not with_grad:
        return loss, None, parts

    grad = sign / diff.size
    if n_mask:
        grad = grad + (l1w / n_mask) * sign * mask[..., None]
    if gs is not None:
        grad = grad - l2w * gs
    return loss, grad.astype(p.dtype, copy=False), parts
