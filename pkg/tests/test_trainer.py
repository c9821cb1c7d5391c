import numpy as np
import pytest

import mvgcrps.trainer as trainer
from mvgcrps.data import ContaminationSpec, PanelDataset, PanelSeries, SplitSpec, generate_synthetic
from mvgcrps.errors import Diverged
from mvgcrps.forecaster import ModelConfig, build_model
from mvgcrps.trainer import (AdamState, TrainConfig, adam_step, clip_gradients, global_norm, make_loss, train,
                             validation_loss)


@pytest.fixture(scope="module")
def data():
    panel = generate_synthetic(4, 300, ContaminationSpec(), seed=2, frequency="daily")
    return PanelDataset.prepare(panel, SplitSpec.make(300, 8, 8, 3))


def quick(**kw):
    base = dict(max_updates=30, batches_per_epoch=10, batch_size=2, slice_size=4, energy_samples=10,
                learning_rate=5e-3)
    base.update(kw)
    return TrainConfig(**base)


def small(data, kind="recurrent-ar"):
    return ModelConfig.for_dataset(data, kind=kind, hidden_size=6, rank=2)


def test_default_train_config():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.l2, cfg.clip_norm, cfg.max_updates) == (1e-3, 1e-8, 10.0, 10000)
    assert (cfg.plateau_patience_updates, cfg.lr_factor, cfg.batch_size, cfg.slice_size) == (500, 0.5, 16, 20)
    assert (cfg.batches_per_epoch, cfg.early_stop_epochs) == (400, 10)
    with pytest.raises(ValueError):
        TrainConfig(lr_factor=1.5)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState.zeros_like(p)
    adam_step(p, {"w": np.zeros(2)}, state, 1e-3, 0.0)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_constant_gradient_step_size():
    p = {"w": np.zeros(3)}
    state = AdamState.zeros_like(p)
    g = {"w": np.array([2.0, -0.5, 1e-3])}
    prev = p["w"].copy()
    for _ in range(500):
        adam_step(p, g, state, 1e-2, 0.0)
        step = p["w"] - prev
        prev = p["w"].copy()
    np.testing.assert_allclose(step, -1e-2 * np.sign(g["w"]), rtol=1e-3)


def test_adam_decoupled_decay_and_nonfinite_skip():
    p = {"w": np.array([2.0])}
    state = AdamState.zeros_like(p)
    adam_step(p, {"w": np.zeros(1)}, state, 0.1, 0.5)
    np.testing.assert_allclose(p["w"], 2.0 - 0.1 * 0.5 * 2.0)
    adam_step(p, {"w": np.array([np.nan])}, state, 0.1, 0.5)
    assert state.skipped == 1 and state.t == 1
    np.testing.assert_allclose(p["w"], 1.9)


def test_clipping():
    out = clip_gradients({"a": np.array([20.0, 0.0])}, 10.0)
    np.testing.assert_allclose(out["a"], [10.0, 0.0])
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_gradients(g, 10.0) is g
    z = clip_gradients({"a": np.zeros(3)}, 10.0)
    np.testing.assert_array_equal(z["a"], 0.0)
    big = clip_gradients({"a": np.full(4, 30.0), "b": np.full(2, -7.0)}, 10.0)
    assert abs(global_norm(big) - 10.0) < 1e-12


def test_make_loss_rejects_unknown():
    with pytest.raises(ValueError):
        make_loss("pinball")


def test_zero_updates_returns_initial_model(data):
    model, hist = train(small(data), quick(max_updates=0, seed=4), data, "mvg-crps")
    init = build_model(small(data), rng=np.random.default_rng(np.random.SeedSequence(4).spawn(4)[0]))
    assert len(hist) == 0
    for k in init.params:
        np.testing.assert_array_equal(model.params[k], init.params[k])


@pytest.mark.parametrize("loss_id", ["mvg-crps", "energy-score"])
def test_training_is_deterministic(data, loss_id):
    a_model, a = train(small(data), quick(seed=1), data, loss_id)
    b_model, b = train(small(data), quick(seed=1), data, loss_id)
    assert a.summary() == b.summary()
    for k in a_model.params:
        np.testing.assert_array_equal(a_model.params[k], b_model.params[k])


def test_history_and_best_checkpoint(data, tmp_path):
    model, hist = train(small(data, "mlp-seq2seq"), quick(max_updates=60, seed=3), data, "log-score")
    assert len(hist) == 6 and hist.updates == sorted(hist.updates) and hist.updates[-1] == 60
    assert all(np.isfinite(hist.train_loss)) and all(np.isfinite(hist.valid_loss))
    best = int(np.argmin(hist.valid_loss))
    assert hist.best_epoch == best
    v = validation_loss(model, data, make_loss("log-score"), chunk=4, noise_seed=3)
    assert v == pytest.approx(hist.valid_loss[best], abs=1e-12)
    hist.to_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,valid_loss,lr,updates,seconds" and len(lines) == 7
    assert "seconds" not in hist.summary() and "seconds" in hist.summary(include_timing=True)


def test_plateau_decay_is_monotone(data):
    _, hist = train(small(data), quick(max_updates=60, plateau_patience_updates=3, seed=0), data, "mvg-crps")
    lrs = np.array(hist.lr)
    assert np.all(np.diff(lrs) <= 0) and lrs[-1] < lrs[0]
    k = np.log(lrs / 5e-3) / np.log(0.5)
    np.testing.assert_allclose(k, np.round(k), atol=1e-9)


def test_early_stopping(data):
    _, hist = train(small(data), quick(max_updates=1000, batches_per_epoch=2, early_stop_epochs=2,
                                       learning_rate=1e-12), data, "mvg-crps")
    assert len(hist) == 3 and hist.updates[-1] == 6


def test_divergence_raises(data, monkeypatch):
    def bad_loss(loss_id, energy_samples=100):
        def fn(m, d, f, z, mask=None, rng=0, with_grad=True):
            g = np.zeros_like(m), np.zeros_like(d), np.zeros_like(f)
            return (np.nan,) + g
        return fn

    monkeypatch.setattr(trainer, "make_loss", bad_loss)
    with pytest.raises(Diverged):
        train(small(data), quick(max_updates=200, batches_per_epoch=100), data, "mvg-crps")


def test_log_score_recovers_mean():
    rng = np.random.default_rng(0)
    T, means = 400, np.array([3.0, -2.0, 0.5])
    values = means + rng.normal(size=(T, 3))
    ts = np.datetime64("2020-01-01", "s") + np.arange(T) * np.timedelta64(86400, "s")
    data = PanelDataset.prepare(PanelSeries(values, ts, "daily", ["a", "b", "c"]), SplitSpec.make(T, 8, 8, 3))
    cfg = ModelConfig.for_dataset(data, kind="mlp-seq2seq", hidden_size=8, rank=2, dropout=0.0)
    model, _ = train(cfg, TrainConfig(max_updates=600, batches_per_epoch=100, batch_size=4, slice_size=3,
                                      learning_rate=5e-3, seed=0), data, "log-score")
    mle = values[: data.split.train_end].mean(axis=0)  # closed-form Gaussian MLE of the level
    batch = data.window(data.split.test_starts(), np.arange(3))
    mu, *_ = model.forward(data.seq2seq_inputs(batch))
    pred = data.scaler.denormalize(np.moveaxis(mu, -2, -1)).mean(axis=(0, 1))
    np.testing.assert_allclose(pred, mle, atol=0.1)
