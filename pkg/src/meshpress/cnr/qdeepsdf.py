"""QuantDeepSDF baseline: a per-point MLP over (x, F_i) with quantized weights.

Eight fully-connected layers with GELU between them and a linear 4-channel
output. Like the convolutional decoder it is trained on TSDF-Def tensors,
but point-wise: each step draws a minibatch of grid points from one shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from ..codec import huffman as hf
from ..nn import layers as nl
from ..nn.adam import AdamState, adam_step
from ..nn.layers import ShapeError
from ..quant import QuantSpec, level_indices
from ..rgr.grid import GridSpec, TsdfDefTensor

N_LAYERS = 8
OUT_CHANNELS = 4


@dataclass(frozen=True)
class QDeepSdfArch:
    feature_dim: int = 16
    hidden: int = 64

    def layer_dims(self):
        dims = [3 + self.feature_dim] + [self.hidden] * (N_LAYERS - 1) + [OUT_CHANNELS]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims())


@dataclass
class QDeepSdfParams:
    arch: QDeepSdfArch
    theta: np.ndarray

    @classmethod
    def init(cls, arch: QDeepSdfArch, seed: int = 0, dtype=np.float32) -> "QDeepSdfParams":
        rng = np.random.default_rng(seed)
        parts = []
        for i, o in arch.layer_dims():
            bound = 1.0 / np.sqrt(i)
            parts.append(rng.uniform(-bound, bound, i * o))
            parts.append(rng.uniform(-bound, bound, o))
        return cls(arch, np.concatenate(parts).astype(dtype))

    @classmethod
    def zeros(cls, arch: QDeepSdfArch, dtype=np.float32) -> "QDeepSdfParams":
        return cls(arch, np.zeros(arch.n_params, dtype=dtype))

    def layers(self, theta: Optional[np.ndarray] = None):
        """(W, b) per layer as views into ``theta`` (default: own parameters)."""
        src = self.theta if theta is None else theta
        out, pos = [], 0
        for i, o in self.arch.layer_dims():
            w = src[pos : pos + i * o].reshape(i, o)
            pos += i * o
            out.append((w, src[pos : pos + o]))
            pos += o
        return out

    @property
    def n_layers(self) -> int:
        return len(self.arch.layer_dims())


def qdeepsdf_forward(
    coords: np.ndarray,
    feature: np.ndarray,
    params: QDeepSdfParams,
    quant: Optional[QuantSpec] = QuantSpec(),
    feature_quant: Optional[QuantSpec] = None,
):
    """Per-point outputs ``(n, 4)`` and a cache for :func:`qdeepsdf_backward`.

    ``quant=None`` disables weight quantization (exact gradients, used by
    the finite-difference checks).
    """
    coords = np.atleast_2d(coords)
    if coords.shape[1] != 3 or feature.shape != (params.arch.feature_dim,):
        raise ShapeError("coords must be (n, 3) and the feature a C-vector")
    if quant is not None:
        theta, t_mask = nl.ste_quantize(params.theta, quant)
    else:
        theta, t_mask = params.theta, None
    if feature_quant is not None:
        feat, f_mask = nl.ste_quantize(feature, feature_quant)
    else:
        feat, f_mask = feature, None
    x = np.concatenate([coords, np.broadcast_to(feat, (len(coords), len(feat)))], axis=1)
    layers = params.layers(theta)
    acts = []
    for idx, (w, b) in enumerate(layers):
        inp = x
        x = inp @ w + b
        act = None
        if idx < len(layers) - 1:
            x, act = nl.gelu(x)
        acts.append((inp, act))
    return x, (acts, theta, t_mask, f_mask, params)


def qdeepsdf_backward(grad_out: np.ndarray, cache):
    """Gradients w.r.t. the raw feature and parameter vector."""
    acts, theta, t_mask, f_mask, params = cache
    layers = params.layers(theta)
    g_theta = np.zeros_like(params.theta)
    g_layers = params.layers(g_theta)
    g = grad_out
    for idx in range(len(layers) - 1, -1, -1):
        inp, act = acts[idx]
        if act is not None:
            g = nl.gelu_backward(g, act)
        gw, gb = g_layers[idx]
        gw[...] = inp.T @ g
        gb[...] = g.sum(axis=0)
        g = g @ layers[idx][0].T
    g_feat = g[:, 3:].sum(axis=0)
    if t_mask is not None:
        g_theta = nl.ste_quantize_backward(g_theta, t_mask)
    if f_mask is not None:
        g_feat = nl.ste_quantize_backward(g_feat, f_mask)
    return g_feat, g_theta


@dataclass
class QDeepSdfState:
    params: QDeepSdfParams
    features: np.ndarray  # (n_shapes, C)
    history: List[float] = field(default_factory=list)


def train_qdeepsdf(
    tensors: Sequence[TsdfDefTensor],
    arch: QDeepSdfArch,
    epochs: int = 400,
    lr: float = 1e-3,
    batch: int = 4096,
    steps_per_epoch: int = 1,
    seed: int = 0,
    feature_quant: QuantSpec = QuantSpec(),
    param_quant: QuantSpec = QuantSpec(),
    params: Optional[QDeepSdfParams] = None,
) -> QDeepSdfState:
    """L1 regression of sampled grid points; one ADAM step per shape and minibatch."""
    if not tensors:
        raise ValueError("no training tensors")
    ks = {t.grid.resolution for t in tensors}
    if len(ks) != 1:
        raise ShapeError(f"training tensors disagree on K: {sorted(ks)}")
    grid = tensors[0].grid
    coords = grid.positions().reshape(-1, 3)
    values = [t.data.reshape(-1, 4).astype(np.float32) for t in tensors]
    rng = np.random.default_rng(seed)
    features = np.clip(rng.normal(0.0, 0.01, (len(tensors), arch.feature_dim)), -1, 1).astype(np.float32)
    params = params if params is not None else QDeepSdfParams.init(arch, seed + 1)
    p_opt = AdamState.zeros_like(params.theta, lr=lr)
    f_opts = [AdamState.zeros_like(f, lr=lr) for f in features]
    state = QDeepSdfState(params, features)
    coords32 = coords.astype(np.float32)
    for epoch in range(epochs):
        losses = []
        for i in rng.permutation(len(tensors)):
            for _ in range(steps_per_epoch):
                idx = rng.integers(0, len(coords), size=batch)
                out, cache = qdeepsdf_forward(
                    coords32[idx], features[i], params, param_quant, feature_quant
                )
                diff = out - values[i][idx]
                losses.append(float(np.abs(diff).mean()))
                g_feat, g_theta = qdeepsdf_backward(np.sign(diff) / diff.size, cache)
                features[i] = np.clip(adam_step(features[i], g_feat.astype(np.float32), f_opts[i]), -1, 1)
                params.theta[:] = np.clip(
                    adam_step(params.theta, g_theta.astype(np.float32), p_opt), param_quant.a, param_quant.b
                )
        state.history.append(float(np.mean(losses)))
    return state


def qdeepsdf_decode(
    feature: np.ndarray,
    params: QDeepSdfParams,
    grid: GridSpec,
    quant: QuantSpec = QuantSpec(),
    feature_quant: QuantSpec = QuantSpec(),
) -> TsdfDefTensor:
    coords = grid.positions().reshape(-1, 3).astype(np.float32)
    out, _ = qdeepsdf_forward(coords, feature, params, quant, feature_quant)
    k = grid.resolution
    return TsdfDefTensor(grid, np.clip(out, -1.0, 1.0).reshape(k, k, k, 4).astype(np.float64))


def qdeepsdf_compressed_bytes(
    state: QDeepSdfState,
    feature_quant: QuantSpec = QuantSpec(),
    param_quant: QuantSpec = QuantSpec(),
) -> int:
    """Huffman-coded size of features plus weights, including code-length tables."""
    total = 0
    for values, q in ((state.features, feature_quant), (state.params.theta, param_quant)):
        levels = level_indices(values, q).ravel()
        table = hf.huffman_build(hf.histogram(levels, q.n_levels))
        total += len(hf.huffman_encode(levels, table)) + q.n_levels
    return total
