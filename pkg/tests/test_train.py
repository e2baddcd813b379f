import struct

import numpy as np
import pytest

from eulerflow.geom import make_sequence
from eulerflow.loss import LossConfig, total_objective
from eulerflow.ode import extract_flow
from eulerflow.prior import PriorConfig, PriorParams, init_params, zero_params
from eulerflow.scenegen import SceneSpec, generate
from eulerflow.train import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    fit,
    load_checkpoint,
    save_checkpoint,
)

SMALL = PriorConfig(depth=2, width=16, seed=3)


def _static_sequence(frames=4, n=30, seed=0):
    pts = np.random.default_rng(seed).uniform(-2, 2, size=(n, 3))
    return make_sequence([pts] * frames)


def _moving_sequence(frames=4, n=30, seed=0, step=(0.1, 0.0, 0.0)):
    pts = np.random.default_rng(seed).uniform(-2, 2, size=(n, 3))
    return make_sequence([pts + i * np.asarray(step) for i in range(frames)])


def test_adam_zero_gradient_leaves_params():
    p = PriorParams(np.arange(21.0), 1, 2)
    q, state = adam_step(p, np.zeros(21), AdamState.zeros(21), lr=0.1)
    np.testing.assert_array_equal(q.values, p.values)
    assert state.step == 1


def test_adam_first_step_is_lr_times_sign():
    # bias correction makes the first step -lr * g / (|g| + eps)
    p = PriorParams(np.zeros(21), 1, 2)
    g = np.linspace(-3, 3, 21)
    q, _ = adam_step(p, g, AdamState.zeros(21), lr=1e-3)
    expected = -1e-3 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(q.values, expected, rtol=1e-12, atol=1e-18)


def test_adam_matches_reference_sequence():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 21))
    p = PriorParams(rng.normal(size=21), 1, 2)
    x, m, v = p.values.copy(), np.zeros(21), np.zeros(21)
    state = AdamState.zeros(21)
    for i, g in enumerate(grads, start=1):
        p, state = adam_step(p, g, state, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.01 * (m / (1 - 0.9**i)) / (np.sqrt(v / (1 - 0.999**i)) + 1e-8)
    np.testing.assert_allclose(p.values, x, rtol=1e-13)


def test_adam_rejects_non_finite():
    p = PriorParams(np.zeros(21), 1, 2)
    g = np.zeros(21)
    g[4] = np.nan
    with pytest.raises(FloatingPointError, match="diverged"):
        adam_step(p, g, AdamState.zeros(21), lr=1e-3)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(PriorParams(np.zeros(21), 1, 2), np.zeros(20), AdamState.zeros(21), lr=1e-3)


def test_static_scene_fit_gives_near_zero_flow():
    seq = generate(SceneSpec(kind="static", num_frames=6, points_per_object=40, background_points=60))
    params, history = fit(seq, SMALL, LossConfig(), TrainConfig(max_epochs=20))
    assert history.totals[history.best_epoch] < 0.1 * history.totals[0]
    for t in range(len(seq) - 1):
        flow = extract_flow(params, seq, t, 1).residuals
        assert np.linalg.norm(flow, axis=1).max() < 0.01


def test_fit_reduces_objective_on_moving_scene():
    seq = _moving_sequence()
    _, history = fit(seq, SMALL, LossConfig(), TrainConfig(max_epochs=40, learning_rate=3e-3))
    assert min(history.totals) < 0.5 * history.totals[0]


def test_fit_deterministic():
    seq = _moving_sequence(n=15)
    cfg = TrainConfig(max_epochs=5, learning_rate=1e-2, seed=4)
    a = fit(seq, SMALL, LossConfig(), cfg)
    b = fit(seq, SMALL, LossConfig(), cfg)
    assert a[0].values.tobytes() == b[0].values.tobytes()
    assert a[1].totals == b[1].totals
    c = fit(seq, SMALL, LossConfig(), TrainConfig(max_epochs=5, learning_rate=1e-2, seed=5))
    assert c[0].values.tobytes() != a[0].values.tobytes()


def test_returns_best_parameters():
    seq = _moving_sequence(n=15)
    # a large learning rate makes the objective bounce around
    params, history = fit(seq, SMALL, LossConfig(), TrainConfig(max_epochs=12, learning_rate=0.2))
    assert history.best_epoch == int(np.argmin(history.totals))
    assert total_objective(params, seq).total == history.totals[history.best_epoch]


def test_history_records_every_epoch():
    seq = _moving_sequence(n=10)
    seen = []
    _, history = fit(seq, SMALL, LossConfig(), TrainConfig(max_epochs=3), progress_callback=seen.append)
    assert [r.epoch for r in history.epochs] == [0, 1, 2, 3]
    assert seen == history.epochs
    for rec in history.epochs:
        assert rec.total == pytest.approx(sum(rec.chamfer_terms.values()) + rec.cycle_term, rel=1e-12)


def test_early_stopping_patience():
    seq = _static_sequence(n=10)
    # zero init is already optimal, so nothing improves after epoch 0
    params, history = fit(
        seq, SMALL, LossConfig(), TrainConfig(max_epochs=50, patience=3), init=zero_params(SMALL)
    )
    assert history.stopped_early
    assert len(history) == 4
    assert history.best_epoch == 0
    assert np.all(params.values == 0.0)


def test_zero_epochs_returns_init():
    seq = _static_sequence(n=10)
    params, history = fit(seq, SMALL, LossConfig(), TrainConfig(max_epochs=0))
    assert params.values.tobytes() == init_params(SMALL).values.tobytes()
    assert len(history) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_at_initialisation():
    seq = _moving_sequence(n=10)
    init = PriorParams(np.full(SMALL.param_count(), 1e200), SMALL.depth, SMALL.width)
    with pytest.raises(TrainingDiverged) as info:
        fit(seq, SMALL, LossConfig(), TrainConfig(max_epochs=3), init=init)
    assert info.value.last_good_epoch == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_mid_training_keeps_best():
    seq = _moving_sequence(n=10)
    # an absurd learning rate overflows within a few steps
    with pytest.raises(TrainingDiverged) as info:
        fit(seq, SMALL, LossConfig(), TrainConfig(max_epochs=50, learning_rate=1e150))
    err = info.value
    assert err.last_good_epoch == err.history.epochs[-1].epoch
    assert np.all(np.isfinite(err.best_params.values))


@pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(patience=0), dict(max_epochs=-1)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_checkpoint_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(1)
    cfg = PriorConfig(depth=3, width=7)
    p = PriorParams(rng.normal(size=cfg.param_count()) * 1e3, 3, 7)
    path = tmp_path / "model.eulf"
    save_checkpoint(p, cfg, path)
    q, qcfg = load_checkpoint(path)
    assert (qcfg.depth, qcfg.width) == (3, 7)
    assert q.values.tobytes() == p.values.tobytes()
    assert path.stat().st_size == 18 + 8 * cfg.param_count()


def test_checkpoint_header_layout(tmp_path):
    cfg = PriorConfig(depth=1, width=2)
    path = tmp_path / "m.eulf"
    save_checkpoint(zero_params(cfg), cfg, path)
    data = path.read_bytes()
    assert data[:4] == b"EULF"
    assert struct.unpack("<HHHQ", data[4:18]) == (1, 1, 2, 21)


def test_checkpoint_rejects_corruption(tmp_path):
    cfg = PriorConfig(depth=1, width=2)
    path = tmp_path / "m.eulf"
    save_checkpoint(zero_params(cfg), cfg, path)
    good = path.read_bytes()

    path.write_bytes(good[:-3])
    with pytest.raises(ValueError, match="bytes"):
        load_checkpoint(path)
    path.write_bytes(good[:10])
    with pytest.raises(ValueError, match="header"):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)
    path.write_bytes(good[:4] + struct.pack("<H", 9) + good[6:])
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)
    path.write_bytes(good[:10] + struct.pack("<Q", 22) + good[18:] + b"\0" * 8)
    with pytest.raises(ValueError, match="parameters"):
        load_checkpoint(path)


def test_checkpoint_config_mismatch(tmp_path):
    with pytest.raises(ValueError):
        save_checkpoint(zero_params(PriorConfig(1, 2)), PriorConfig(1, 3), tmp_path / "x")
