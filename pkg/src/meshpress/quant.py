"""Uniform scalar quantization on a (2**N + 1)-level lattice over [a, b]."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class QuantSpec:
    a: float = -1.0
    b: float = 1.0
    bits: int = 8

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError(f"quantization interval [{self.a}, {self.b}] is empty")
        if self.bits < 1:
            raise ValueError("bits must be >= 1")

    @property
    def step(self) -> float:
        return (self.b - self.a) / 2 ** self.bits

    @property
    def n_levels(self) -> int:
        return 2 ** self.bits + 1


def _round_half_away(y: np.ndarray) -> np.ndarray:
    return np.sign(y) * np.floor(np.abs(y) + 0.5)


def level_indices(x, spec: QuantSpec) -> np.ndarray:
    """Integer lattice index of Q(x), in [0, 2**bits]."""
    x = np.asarray(x)
    y = (np.clip(x, spec.a, spec.b) - spec.a) / spec.step
    return _round_half_away(y).astype(np.int64)


def quantize(x, spec: QuantSpec = QuantSpec()) -> np.ndarray:
    """Q(x) = round((clamp(x, a, b) - a) / s) * s + a, rounding half away from zero.

    The result keeps the floating dtype of ``x``.
    """
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    y = (np.clip(x.astype(np.float64), spec.a, spec.b) - spec.a) / spec.step
    return (_round_half_away(y) * spec.step + spec.a).astype(dtype)
