"""Joint training of embedded features and decoder parameters.

All trainable state is float32. A training run is fully described by
:class:`TrainState`, which includes the optimizer moments, so a run that
is checkpointed and resumed is bit-identical to an uninterrupted one.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from ..nn.adam import AdamState, adam_step
from ..nn.layers import ShapeError
from ..quant import QuantSpec
from .decoder import DecoderArch, DecoderParams, UpModule, decoder_backward, decoder_forward
from .loss import TrainConfig, regression_loss

DTYPE = np.float32
STATE_VERSION = 1


@dataclass
class TrainState:
    arch: DecoderArch
    cfg: TrainConfig
    params: DecoderParams
    features: np.ndarray  # (n_shapes, K', K', K', C)
    param_opt: AdamState
    feature_opts: List[AdamState]
    epoch: int = 0
    history: List[float] = field(default_factory=list)
    names: List[str] = field(default_factory=list)

    @property
    def n_shapes(self) -> int:
        return len(self.features)


def _targets(tensors, arch: DecoderArch) -> List[np.ndarray]:
    if not tensors:
        raise ValueError("no training tensors")
    ks = {t.grid.resolution for t in tensors}
    if len(ks) != 1:
        raise ShapeError(f"training tensors disagree on K: {sorted(ks)}")
    arch.check_target(ks.pop())
    return [np.ascontiguousarray(t.data, dtype=DTYPE) for t in tensors]


def _init_feature(rng: np.random.Generator, arch: DecoderArch, std: float) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, arch.feature_shape), -1.0, 1.0).astype(DTYPE)


def init_state(n_shapes: int, arch: DecoderArch, cfg: TrainConfig, names=None) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    features = np.stack([_init_feature(rng, arch, cfg.feature_std) for _ in range(n_shapes)])
    params = DecoderParams.init(arch, seed=cfg.seed + 1, dtype=DTYPE)
    return TrainState(
        arch=arch,
        cfg=cfg,
        params=params,
        features=features,
        param_opt=AdamState.zeros_like(params.theta, lr=cfg.lr),
        feature_opts=[AdamState.zeros_like(f, lr=cfg.lr) for f in features],
        names=list(names) if names is not None else [f"shape{i:03d}" for i in range(n_shapes)],
    )


def epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate of ``epoch``; a cosine schedule always spans ``cfg.epochs``."""
    if cfg.lr_schedule == "cosine" and cfg.epochs > 0:
        return 0.5 * cfg.lr * (1.0 + np.cos(np.pi * min(epoch, cfg.epochs) / cfg.epochs))
    return cfg.lr


def shape_step(state: TrainState, index: int, target: np.ndarray, update_params: bool = True) -> float:
    """Forward, loss, backward and ADAM updates for one shape; returns its loss."""
    cfg, arch = state.cfg, state.arch
    out, cache = decoder_forward(
        state.features[index], state.params, arch, cfg.feature_quant, cfg.param_quant
    )
    loss, grad, _ = regression_loss(out, target, cfg)
    g_feat, g_theta = decoder_backward(grad, cache, state.params)
    new_feat = adam_step(state.features[index], g_feat.astype(DTYPE), state.feature_opts[index])
    state.features[index] = np.clip(new_feat, -1.0, 1.0)
    if update_params:
        new_theta = adam_step(state.params.theta, g_theta.astype(DTYPE), state.param_opt)
        state.params.theta[:] = np.clip(new_theta, cfg.param_quant.a, cfg.param_quant.b)
    return float(loss)


def train_set(
    tensors: Sequence,
    arch: DecoderArch,
    cfg: TrainConfig = TrainConfig(),
    state: Optional[TrainState] = None,
    epochs: Optional[int] = None,
    names=None,
    log=None,
) -> TrainState:
    """Train features and decoder jointly; resumes from ``state`` when given.

    Runs until ``state.epoch`` reaches ``epochs`` (default ``cfg.epochs``).
    Each epoch visits the shapes in an order drawn from ``(seed, epoch)``
    and takes one ADAM step per shape.
    """
    targets = _targets(tensors, arch)
    if state is None:
        state = init_state(len(targets), arch, cfg, names)
    elif state.n_shapes != len(targets):
        raise ValueError(f"state holds {state.n_shapes} features but {len(targets)} tensors were given")
    total = cfg.epochs if epochs is None else epochs
    while state.epoch < total:
        order = np.random.default_rng([state.cfg.seed, state.epoch]).permutation(len(targets))
        lr = epoch_lr(state.cfg, state.epoch)
        for opt in [state.param_opt] + state.feature_opts:
            opt.lr = lr
        losses = [shape_step(state, int(i), targets[i]) for i in order]
        state.history.append(float(np.mean(losses)))
        state.epoch += 1
        if log is not None:
            log(state.epoch, state.history[-1])
    return state


def fit_new_feature(
    new_tensor,
    params: DecoderParams,
    arch: DecoderArch,
    cfg: TrainConfig = TrainConfig(),
    steps: Optional[int] = None,
) -> np.ndarray:
    """Optimize one embedded feature against frozen decoder parameters."""
    target = _targets([new_tensor], arch)[0]
    state = TrainState(
        arch=arch,
        cfg=cfg,
        params=params,
        features=_init_feature(np.random.default_rng(cfg.seed), arch, cfg.feature_std)[None],
        param_opt=AdamState.zeros_like(params.theta[:0]),
        feature_opts=[],
    )
    state.feature_opts.append(AdamState.zeros_like(state.features[0], lr=cfg.lr))
    best, best_loss = state.features[0].copy(), np.inf
    for _ in range(cfg.epochs if steps is None else steps):
        before = state.features[0].copy()
        loss = shape_step(state, 0, target, update_params=False)
        if loss < best_loss:
            best, best_loss = before, loss
    out, _ = decoder_forward(state.features[0], params, arch, cfg.feature_quant, cfg.param_quant)
    if regression_loss(out, target, cfg, with_grad=False)[0] < best_loss:
        best = state.features[0].copy()
    return best


# ---------------------------------------------------------------------------
# model-state file: npz arrays plus a JSON metadata record
# ---------------------------------------------------------------------------

def _quant_dict(q: QuantSpec) -> dict:
    return {"a": q.a, "b": q.b, "bits": q.bits}


def arch_to_dict(arch: DecoderArch) -> dict:
    return asdict(arch)


def arch_from_dict(d: dict) -> DecoderArch:
    d = dict(d)
    d["modules"] = tuple(UpModule(**m) for m in d["modules"])
    return DecoderArch(**d)


def config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["feature_quant"] = _quant_dict(cfg.feature_quant)
    d["param_quant"] = _quant_dict(cfg.param_quant)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["feature_quant"] = QuantSpec(**d["feature_quant"])
    d["param_quant"] = QuantSpec(**d["param_quant"])
    return TrainConfig(**d)


def save_state(state: TrainState, path) -> None:
    meta = {
        "version": STATE_VERSION,
        "arch": arch_to_dict(state.arch),
        "config": config_to_dict(state.cfg),
        "epoch": state.epoch,
        "history": state.history,
        "names": state.names,
        "param_t": state.param_opt.t,
        "feature_t": [o.t for o in state.feature_opts],
    }
    n = state.n_shapes
    empty = np.zeros((0,) + state.arch.feature_shape, dtype=DTYPE)
    arrays = {
        "meta": np.array(json.dumps(meta)),
        "theta": state.params.theta,
        "features": state.features,
        "param_m": state.param_opt.m,
        "param_v": state.param_opt.v,
        "feature_m": np.stack([o.m for o in state.feature_opts]) if n else empty,
        "feature_v": np.stack([o.v for o in state.feature_opts]) if n else empty,
    }
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


class StateFileError(ValueError):
    pass


def load_state(path) -> TrainState:
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            arrays = {k: z[k] for k in z.files if k != "meta"}
    except (OSError, KeyError, ValueError) as exc:
        raise StateFileError(f"cannot read model state {path}: {exc}") from exc
    if meta.get("version") != STATE_VERSION:
        raise StateFileError(f"unsupported model-state version {meta.get('version')}")
    arch = arch_from_dict(meta["arch"])
    cfg = config_from_dict(meta["config"])
    params = DecoderParams.zeros(arch, DTYPE)
    if arrays["theta"].shape != params.theta.shape:
        raise StateFileError("parameter vector does not match the architecture")
    params.theta[:] = arrays["theta"]
    kw = dict(lr=cfg.lr)
    param_opt = AdamState(arrays["param_m"], arrays["param_v"], t=meta["param_t"], **kw)
    feature_opts = [
        AdamState(m, v, t=t, **kw)
        for m, v, t in zip(arrays["feature_m"], arrays["feature_v"], meta["feature_t"])
    ]
    return TrainState(
        arch=arch,
        cfg=cfg,
        params=params,
        features=arrays["features"].astype(DTYPE),
        param_opt=param_opt,
        feature_opts=feature_opts,
        epoch=meta["epoch"],
        history=list(meta["history"]),
        names=list(meta["names"]),
    )
