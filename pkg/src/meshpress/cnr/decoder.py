"""Quantization-aware auto-decoder: embedded feature -> TSDF-Def tensor.

Layout: a head convolution widening the feature channels, L upsampling
modules (conv -> pixel shuffle -> activation) and a final projection to the
4 TSDF-Def channels, hard-clamped to [-1, 1]. Every weight and the input
feature pass through the quantizer with straight-through gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..nn import layers as nl
from ..nn.layers import Conv3Spec, ShapeError
from ..quant import QuantSpec
from ..rgr.grid import GridSpec, TsdfDefTensor

OUT_CHANNELS = 4


@dataclass(frozen=True)
class UpModule:
    kernel: int = 3
    scale: int = 2
    out_channels: int = 16


@dataclass(frozen=True)
class DecoderArch:
    feature_res: int = 4
    feature_channels: int = 16
    head_width: int = 64
    modules: Tuple[UpModule, ...] = tuple(UpModule(3, 2, 16) for _ in range(5))
    head_kernel: int = 1
    final_kernel: int = 1

    def __post_init__(self):
        if self.feature_res < 1 or self.feature_channels < 1 or self.head_width < 1:
            raise ValueError("decoder dimensions must be positive")
        object.__setattr__(self, "modules", tuple(self.modules))

    @classmethod
    def uniform(cls, feature_res=4, feature_channels=16, head_width=64, n_modules=5,
                width=16, scale=2, kernel=3, final_width: Optional[int] = None) -> "DecoderArch":
        widths = [width] * n_modules
        if final_width is not None and n_modules:
            widths[-1] = final_width
        return cls(feature_res, feature_channels, head_width,
                   tuple(UpModule(kernel, scale, w) for w in widths))

    @property
    def output_res(self) -> int:
        k = self.feature_res
        for m in self.modules:
            k *= m.scale
        return k

    def conv_specs(self) -> List[Tuple[str, Conv3Spec]]:
        specs = [("head", Conv3Spec(self.head_kernel, self.feature_channels, self.head_width))]
        c_in = self.head_width
        for i, m in enumerate(self.modules):
            specs.append((f"up{i}", Conv3Spec(m.kernel, c_in, m.scale**3 * m.out_channels)))
            c_in = m.out_channels
        specs.append(("final", Conv3Spec(self.final_kernel, c_in, OUT_CHANNELS)))
        return specs

    @property
    def n_params(self) -> int:
        return sum(spec.n_params for _, spec in self.conv_specs())

    @property
    def feature_shape(self) -> Tuple[int, int, int, int]:
        k = self.feature_res
        return (k, k, k, self.feature_channels)

    def check_target(self, resolution: int) -> None:
        if self.output_res != resolution:
            raise ShapeError(
                f"decoder produces K={self.output_res} but target tensors have K={resolution}"
            )


@dataclass
class DecoderParams:
    """Flat parameter vector plus the (name -> slice, shape) map into it."""

    theta: np.ndarray
    layout: Dict[str, Tuple[slice, tuple]] = field(repr=False)

    @classmethod
    def zeros(cls, arch: DecoderArch, dtype=np.float32) -> "DecoderParams":
        layout = {}
        offset = 0
        for name, spec in arch.conv_specs():
            for part, shape in (("w", spec.weight_shape), ("b", (spec.out_channels,))):
                size = int(np.prod(shape))
                layout[f"{name}.{part}"] = (slice(offset, offset + size), shape)
                offset += size
        return cls(np.zeros(offset, dtype=dtype), layout)

    @classmethod
    def init(cls, arch: DecoderArch, seed: int = 0, dtype=np.float32) -> "DecoderParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        params = cls.zeros(arch, dtype)
        rng = np.random.default_rng(seed)
        for name, spec in arch.conv_specs():
            bound = 1.0 / np.sqrt(spec.kernel**3 * spec.in_channels)
            for part in ("w", "b"):
                sl, shape = params.layout[f"{name}.{part}"]
                params.theta[sl] = rng.uniform(-bound, bound, size=int(np.prod(shape)))
        return params

    def view(self, key: str, theta: Optional[np.ndarray] = None) -> np.ndarray:
        sl, shape = self.layout[key]
        src = self.theta if theta is None else theta
        return src[sl].reshape(shape)

    def with_theta(self, theta: np.ndarray) -> "DecoderParams":
        return DecoderParams(theta, self.layout)

    def copy(self) -> "DecoderParams":
        return DecoderParams(self.theta.copy(), self.layout)


def decoder_forward(
    feature: np.ndarray,
    params: DecoderParams,
    arch: DecoderArch,
    feature_quant: QuantSpec = QuantSpec(),
    param_quant: QuantSpec = QuantSpec(),
):
    """Regress a K^3 x 4 tensor from one embedded feature.

    Returns ``(output, cache)``; pass the cache to :func:`decoder_backward`.
    """
    if feature.shape != arch.feature_shape:
        raise ShapeError(f"feature shape {feature.shape} does not match {arch.feature_shape}")
    q_theta, theta_cache = nl.ste_quantize(params.theta, param_quant)
    x, feat_cache = nl.ste_quantize(feature, feature_quant)
    caches = []
    specs = arch.conv_specs()
    for idx, (name, spec) in enumerate(specs):
        w = params.view(f"{name}.w", q_theta)
        b = params.view(f"{name}.b", q_theta)
        x, conv_cache = nl.conv3d(x, w, b, spec)
        step = {"name": name, "conv": conv_cache}
        if name.startswith("up"):
            scale = arch.modules[idx - 1].scale
            x = nl.pixel_shuffle3d(x, scale)
            x, step["act"] = nl.activation(x)
            step["scale"] = scale
        caches.append(step)
    out, clamp_cache = nl.ste_clamp(x, -1.0, 1.0)
    return out, (caches, clamp_cache, theta_cache, feat_cache)


def decoder_backward(grad_out: np.ndarray, cache, params: DecoderParams):
    """Gradients w.r.t. the raw (pre-quantization) feature and parameter vector."""
    caches, clamp_cache, theta_cache, feat_cache = cache
    g = nl.ste_clamp_backward(grad_out, clamp_cache)
    g_theta = np.zeros_like(params.theta)
    for step in reversed(caches):
        if "act" in step:
            g = nl.activation_backward(g, step["act"])
            g = nl.pixel_shuffle3d_backward(g, step["scale"])
        g, gw, gb = nl.conv3d_backward(g, step["conv"])
        name = step["name"]
        g_theta[params.layout[f"{name}.w"][0]] = gw.ravel()
        g_theta[params.layout[f"{name}.b"][0]] = gb
    g_theta = nl.ste_quantize_backward(g_theta, theta_cache)
    g_feat = nl.ste_quantize_backward(g, feat_cache)
    return g_feat, g_theta


def decode_tensor(
    feature: np.ndarray,
    params: DecoderParams,
    arch: DecoderArch,
    feature_quant: QuantSpec = QuantSpec(),
    param_quant: QuantSpec = QuantSpec(),
) -> TsdfDefTensor:
    out, _ = decoder_forward(feature, params, arch, feature_quant, param_quant)
    return TsdfDefTensor(GridSpec(arch.output_res), out)
