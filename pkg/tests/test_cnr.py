import numpy as np
import pytest

from meshpress.cnr import (
    DecoderArch,
    DecoderParams,
    QDeepSdfArch,
    QDeepSdfParams,
    TrainConfig,
    UpModule,
    decoder_backward,
    decoder_forward,
    fit_new_feature,
    load_state,
    qdeepsdf_backward,
    qdeepsdf_compressed_bytes,
    qdeepsdf_decode,
    qdeepsdf_forward,
    regression_loss,
    save_state,
    surface_mask,
    train_qdeepsdf,
    train_set,
)
from meshpress.cnr.train import StateFileError, epoch_lr
from meshpress.metrics import chamfer_distance
from meshpress.mesh import sample_surface
from meshpress.nn import ShapeError
from meshpress.quant import QuantSpec, quantize
from meshpress.rgr.dmc import dmc_extract
from meshpress.rgr.grid import GridSpec, TsdfDefTensor
from meshpress.shapes import box, sphere, torus

TINY = DecoderArch(4, 8, 16, (UpModule(3, 2, 8), UpModule(3, 2, 8)))  # K = 16
MICRO = DecoderArch(2, 3, 4, (UpModule(3, 2, 2), UpModule(1, 2, 2)))  # K = 8, for gradients
# default widths; the TINY widths stall on the SSIM plateau within 400 steps
OVERFIT = DecoderArch(4, 8, 64, (UpModule(3, 2, 16), UpModule(3, 2, 16)))
# a 2^-39 lattice step is far below the finite-difference step
FINE = QuantSpec(-1.0, 1.0, 40)


def analytic_tensor(sdf, k, rng=None):
    grid = GridSpec(k)
    data = np.zeros((k, k, k, 4))
    data[..., 0] = np.clip(sdf(grid.positions()) / grid.truncation, -1, 1)
    if rng is not None:
        data[..., 1:] = rng.uniform(-0.5, 0.5, (k, k, k, 3))
    return TsdfDefTensor(grid, data)


# --- decoder ---------------------------------------------------------------------

def test_output_dims_default_configuration():
    arch = DecoderArch()
    assert arch.output_res == 128
    assert arch.feature_shape == (4, 4, 4, 16)
    with pytest.raises(ShapeError):
        arch.check_target(64)


def test_output_dims_forward():
    feat = np.zeros(TINY.feature_shape, np.float32)
    out, _ = decoder_forward(feat, DecoderParams.init(TINY, 0), TINY)
    assert out.shape == (16, 16, 16, 4)
    with pytest.raises(ShapeError):
        decoder_forward(np.zeros((4, 4, 4, 3), np.float32), DecoderParams.init(TINY, 0), TINY)


def test_zero_params_give_clamped_final_bias():
    params = DecoderParams.zeros(TINY)
    params.view("final.b")[:] = [0.25, -3.0, 0.5, 2.0]
    rng = np.random.default_rng(0)
    out, _ = decoder_forward(rng.normal(size=TINY.feature_shape).astype(np.float32), params, TINY)
    assert np.all(out == np.array([0.25, -1.0, 0.5, 1.0], np.float32))


def test_prequantized_params_idempotent():
    rng = np.random.default_rng(1)
    params = DecoderParams.init(TINY, 3)
    feat = rng.normal(0, 0.3, TINY.feature_shape).astype(np.float32)
    q = QuantSpec()
    pre = params.with_theta(quantize(params.theta, q))
    a, _ = decoder_forward(feat, params, TINY, q, q)
    b, _ = decoder_forward(quantize(feat, q), pre, TINY, q, q)
    assert np.array_equal(a, b)


def test_decoder_gradients_finite_differences():
    rng = np.random.default_rng(2)
    params = DecoderParams.init(MICRO, 0, np.float64)
    feat = rng.normal(0, 0.4, MICRO.feature_shape)
    c = rng.normal(size=(8, 8, 8, 4))

    def f(feat_, theta_):
        out, _ = decoder_forward(feat_, params.with_theta(theta_), MICRO, FINE, FINE)
        return float((out * c).sum())

    _, cache = decoder_forward(feat, params, MICRO, FINE, FINE)
    g_feat, g_theta = decoder_backward(c, cache, params)
    eps = 1e-6
    for idx in rng.choice(feat.size, 20, replace=False):
        e = np.zeros(feat.size)
        e[idx] = eps
        e = e.reshape(feat.shape)
        num = (f(feat + e, params.theta) - f(feat - e, params.theta)) / (2 * eps)
        assert abs(num - g_feat.ravel()[idx]) < 1e-4 * max(1.0, abs(num))
    for idx in rng.choice(params.theta.size, 40, replace=False):
        e = np.zeros(params.theta.size)
        e[idx] = eps
        num = (f(feat, params.theta + e) - f(feat, params.theta - e)) / (2 * eps)
        assert abs(num - g_theta[idx]) < 1e-4 * max(1.0, abs(num))


# --- loss ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def loss_pair():
    rng = np.random.default_rng(3)
    target = analytic_tensor(sphere(0.5), 12, rng).data
    pred = np.clip(target + rng.normal(0, 0.1, target.shape), -1, 1)
    return pred, target


def test_loss_identity(loss_pair):
    _, target = loss_pair
    loss, grad, parts = regression_loss(target, target)
    assert loss == 0.0 and parts["ssim"] == 1.0


def test_loss_saturated_mask(loss_pair):
    pred, target = loss_pair
    loss, _, parts = regression_loss(pred, target, tau=1.0)
    assert parts["masked"] == pytest.approx(parts["l1"], abs=1e-12)
    assert loss == pytest.approx(6 * parts["l1"] + 10 * (1 - parts["ssim"]), abs=1e-12)
    assert surface_mask(target, 1.0).all()


def test_loss_weight_zero_is_mae(loss_pair):
    pred, target = loss_pair
    loss, _, _ = regression_loss(pred, target, lambda1=0.0, lambda2=0.0)
    assert abs(loss - np.abs(pred - target).mean()) < 1e-12


def test_loss_gradient(loss_pair):
    pred, target = loss_pair
    cfg = TrainConfig()
    _, grad, _ = regression_loss(pred, target, cfg)
    rng = np.random.default_rng(4)
    eps = 1e-7
    for _ in range(30):
        idx = tuple(rng.integers(0, 12, 3)) + (int(rng.integers(4)),)
        p, m = pred.copy(), pred.copy()
        p[idx] += eps
        m[idx] -= eps
        num = (regression_loss(p, target, cfg, False)[0] - regression_loss(m, target, cfg, False)[0]) / (2 * eps)
        assert abs(num - grad[idx]) < 1e-5 * max(1.0, abs(num))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(tau=0.0)
    with pytest.raises(ValueError):
        TrainConfig(lambda1=-1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


# --- training -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_targets():
    return [analytic_tensor(sphere(0.55), 16), analytic_tensor(torus(0.5, 0.2), 16), analytic_tensor(box((0.5, 0.4, 0.3)), 16)]


@pytest.mark.parametrize("schedule", ["constant", "cosine"])
def test_train_deterministic_and_resumable(tiny_targets, tmp_path, schedule):
    cfg = TrainConfig(epochs=6, seed=5, lr_schedule=schedule)
    a = train_set(tiny_targets, TINY, cfg)
    b = train_set(tiny_targets, TINY, cfg)
    assert np.array_equal(a.params.theta, b.params.theta)
    assert np.array_equal(a.features, b.features)
    assert a.history == b.history

    half = train_set(tiny_targets, TINY, cfg, epochs=3)
    path = tmp_path / "state.npz"
    save_state(half, path)
    resumed = train_set(tiny_targets, TINY, cfg, state=load_state(path))
    assert np.array_equal(resumed.params.theta, a.params.theta)
    assert np.array_equal(resumed.features, a.features)
    assert resumed.history == a.history


def test_cosine_schedule():
    cfg = TrainConfig(epochs=4, lr=1e-3, lr_schedule="cosine")
    assert [epoch_lr(cfg, e) for e in range(5)] == pytest.approx([1e-3, 8.5355339e-4, 5e-4, 1.4644661e-4, 0.0])
    assert epoch_lr(TrainConfig(epochs=4), 3) == 1e-3
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="step")


def test_train_rejects_mixed_resolution(tiny_targets):
    with pytest.raises(ShapeError):
        train_set([tiny_targets[0], analytic_tensor(sphere(0.5), 8)], TINY, TrainConfig(epochs=1))
    with pytest.raises(ShapeError):
        train_set([analytic_tensor(sphere(0.5), 8)], TINY, TrainConfig(epochs=1))


def test_state_file_errors(tmp_path):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a state")
    with pytest.raises(StateFileError):
        load_state(bad)


@pytest.fixture(scope="module")
def overfit_sphere():
    target = analytic_tensor(sphere(0.55), 16)
    state = train_set([target], OVERFIT, TrainConfig(epochs=400))
    return target, state


@pytest.mark.slow
def test_overfit_single_shape(overfit_sphere):
    target, state = overfit_sphere
    out, _ = decoder_forward(state.features[0], state.params, OVERFIT)
    mask = surface_mask(target.data, TrainConfig().tau)
    assert np.abs(out - target.data)[mask].mean() < 0.05
    h = np.array(state.history)
    assert np.all(np.isfinite(h)) and h[-1] < h[0]


@pytest.mark.slow
def test_overfit_loss_smoothed_monotone(overfit_sphere):
    _, state = overfit_sphere
    blocks = np.array(state.history).reshape(-1, 10).mean(axis=1)
    assert np.all(np.diff(blocks) <= 0.0)


@pytest.mark.slow
def test_refit_feature_keeps_params_frozen(overfit_sphere):
    target, state = overfit_sphere
    before = state.params.theta.copy()
    feat = fit_new_feature(target, state.params, OVERFIT, TrainConfig(epochs=400))
    assert state.params.theta.tobytes() == before.tobytes()
    gt = sample_surface(dmc_extract(target), 20000, 1)
    joint = dmc_extract(TsdfDefTensor(target.grid, decoder_forward(state.features[0], state.params, OVERFIT)[0].astype(float)))
    refit = dmc_extract(TsdfDefTensor(target.grid, decoder_forward(feat, state.params, OVERFIT)[0].astype(float)))
    cd_joint = chamfer_distance(sample_surface(joint, 20000, 0), gt)
    cd_refit = chamfer_distance(sample_surface(refit, 20000, 0), gt)
    assert cd_refit <= 1.5 * cd_joint


# --- QuantDeepSDF baseline ---------------------------------------------------------------

def test_qdeepsdf_shapes_and_zero_network():
    arch = QDeepSdfArch(feature_dim=5, hidden=8)
    assert len(arch.layer_dims()) == 8
    params = QDeepSdfParams.zeros(arch)
    params.layers()[-1][1][:] = [0.1, 0.2, -0.3, 0.4]
    out, _ = qdeepsdf_forward(np.zeros((7, 3)), np.zeros(5, np.float32), params, quant=None)
    assert out.shape == (7, 4)
    assert np.allclose(out, [0.1, 0.2, -0.3, 0.4])


def test_qdeepsdf_gradients():
    rng = np.random.default_rng(6)
    arch = QDeepSdfArch(feature_dim=4, hidden=6)
    params = QDeepSdfParams.init(arch, 0, np.float64)
    coords = rng.uniform(-1, 1, (10, 3))
    feat = rng.normal(0, 0.5, 4)
    c = rng.normal(size=(10, 4))
    f = lambda: float((qdeepsdf_forward(coords, feat, params, quant=None)[0] * c).sum())
    _, cache = qdeepsdf_forward(coords, feat, params, quant=None)
    g_feat, g_theta = qdeepsdf_backward(c, cache)
    eps = 1e-6
    for arr, g in ((feat, g_feat), (params.theta, g_theta)):
        for idx in rng.choice(arr.size, min(arr.size, 40), replace=False):
            old = arr[idx]
            arr[idx] = old + eps
            fp = f()
            arr[idx] = old - eps
            fm = f()
            arr[idx] = old
            num = (fp - fm) / (2 * eps)
            assert abs(num - g[idx]) < 1e-5 * max(1.0, abs(num))


def test_qdeepsdf_training():
    target = analytic_tensor(sphere(0.5), 16)
    arch = QDeepSdfArch(feature_dim=8, hidden=32)
    a = train_qdeepsdf([target], arch, epochs=300, lr=3e-3, batch=1024, seed=1)
    b = train_qdeepsdf([target], arch, epochs=300, lr=3e-3, batch=1024, seed=1)
    assert np.array_equal(a.params.theta, b.params.theta)
    assert a.history[-1] < 0.1
    decoded = qdeepsdf_decode(a.features[0], a.params, target.grid)
    assert decoded.data.shape == (16, 16, 16, 4)


def test_qdeepsdf_width_orders_size():
    target = analytic_tensor(sphere(0.5), 8)
    sizes = [
        qdeepsdf_compressed_bytes(train_qdeepsdf([target], QDeepSdfArch(8, w), epochs=2, batch=64))
        for w in (16, 48)
    ]
    assert sizes[0] < sizes[1]
