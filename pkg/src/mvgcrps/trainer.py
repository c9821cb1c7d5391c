"""Training loop: Adam with decoupled l2, global-norm clipping, plateau LR decay, early stopping."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import PanelDataset, sample_training_batch
from .errors import Diverged, MVGError
from .forecaster import ModelConfig, build_model
from .scoring import LOSS_IDS, EnergyScoreConfig, loss_function

IMPROVEMENT = 1e-6
DIVERGENCE_STREAK = 50
PLATEAU_SMOOTHING = 0.1  # weight of the newest batch in the running training loss


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    l2: float = 1e-8
    clip_norm: float = 10.0
    max_updates: int = 10000
    plateau_patience_updates: int = 500
    lr_factor: float = 0.5
    batch_size: int = 16
    slice_size: int = 20
    batches_per_epoch: int = 400
    early_stop_epochs: int = 10
    energy_samples: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.clip_norm <= 0 or not 0 < self.lr_factor < 1:
            raise ValueError("learning_rate, clip_norm must be positive and lr_factor in (0, 1)")
        for name in ("batch_size", "slice_size", "batches_per_epoch", "early_stop_epochs",
                     "plateau_patience_updates", "energy_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.max_updates < 0 or self.l2 < 0:
            raise ValueError("max_updates and l2 must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    updates: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    skipped_steps: int = 0
    best_epoch: int | None = None

    COLUMNS = ("epoch", "train_loss", "valid_loss", "lr", "updates", "seconds")

    def __len__(self):
        return len(self.epoch)

    def append(self, **row):
        for key in self.COLUMNS:
            getattr(self, key).append(row[key])

    @property
    def best_valid(self) -> float | None:
        return None if self.best_epoch is None else self.valid_loss[self.best_epoch]

    def seconds_per_epoch(self) -> float:
        return float(np.mean(self.seconds)) if self.seconds else float("nan")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for row in zip(*(getattr(self, k) for k in self.COLUMNS)):
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])

    def summary(self, include_timing: bool = False) -> dict:
        """JSON-ready summary; wall-clock fields only when ``include_timing`` (they break reruns)."""
        out = {k: list(getattr(self, k)) for k in self.COLUMNS if k != "seconds"}
        out.update(skipped_steps=self.skipped_steps, best_epoch=self.best_epoch, best_valid=self.best_valid)
        if include_timing:
            out["seconds"] = list(self.seconds)
        return out

    def to_json(self, path, include_timing: bool = False) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(include_timing), fh, indent=2, sort_keys=True)
            fh.write("\n")


# --------------------------------------------------------------------------
# optimizer pieces


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    skipped: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: dict, max_norm: float = 10.0) -> dict:
    """Rescale all gradients by ``max_norm / norm`` when the global L2 norm exceeds ``max_norm``."""
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, l2: float = 1e-8):
    """One Adam update with a decoupled weight-decay term ``lr * l2 * p``.

    Non-finite gradients leave parameters and moments untouched and bump
    ``state.skipped``. Returns ``(params, state)``; arrays are updated in place.
    """
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        return params, state
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * ((m / c1) / (np.sqrt(v / c2) + state.eps) + l2 * p)
    return params, state


# --------------------------------------------------------------------------
# losses on batches


def make_loss(loss_id: str, energy_samples: int = 100):
    if loss_id not in LOSS_IDS:
        raise ValueError(f"unknown loss id {loss_id!r}; expected one of {LOSS_IDS}")
    if loss_id == "energy-score":
        return loss_function(loss_id, cfg=EnergyScoreConfig(num_samples=energy_samples))
    return loss_function(loss_id)


def batch_loss(model, data: PanelDataset, batch, loss_fn, *, training=False, rng=None, noise_rng=0,
               with_grad=True):
    """Mean loss over the forecast items of ``batch`` and, optionally, parameter gradients.

    Recurrent model: one item per (slice, horizon step), a ``B``-dim Gaussian
    over the slice's series. Seq2Seq model: one item per (slice, series), a
    ``Q``-dim Gaussian over the horizon. Items with any missing target are
    left out.
    """
    if model.config.kind == "recurrent-ar":
        mu, d, lrow, cache = model.forward(batch.features, training=training, rng=rng)
        P = batch.P
        m = np.swapaxes(mu[..., P:], -1, -2)
        dd = np.swapaxes(d[..., P:], -1, -2)
        ll = np.swapaxes(lrow[..., P:, :], -3, -2)
        z = np.swapaxes(batch.target, -1, -2)
        mask = np.swapaxes(batch.target_mask, -1, -2).all(axis=-1)
    else:
        mu, d, lrow, cache = model.forward(data.seq2seq_inputs(batch), training=training, rng=rng)
        m, dd, ll, z = mu, d, lrow, batch.target
        mask = batch.target_mask.all(axis=-1)
    value, gm, gd, gl = loss_fn(m, dd, ll, z, mask, rng=noise_rng, with_grad=with_grad)
    if not with_grad:
        return value, None
    if model.config.kind == "recurrent-ar":
        gmu, gdd, gll = np.zeros_like(mu), np.zeros_like(d), np.zeros_like(lrow)
        gmu[..., P:] = np.swapaxes(gm, -1, -2)
        gdd[..., P:] = np.swapaxes(gd, -1, -2)
        gll[..., P:, :] = np.swapaxes(gl, -3, -2)
    else:
        gmu, gdd, gll = gm, gd, gl
    return value, model.backward(cache, gmu, gdd, gll)


def validation_loss(model, data: PanelDataset, loss_fn, chunk: int = 20, noise_seed: int = 0) -> float:
    """Loss averaged over validation start points and all series (chunks of ``chunk`` series)."""
    starts = data.split.valid_starts()
    total, count = 0.0, 0
    noise = np.random.default_rng(noise_seed)
    for lo in range(0, data.n_series, chunk):
        series = np.arange(lo, min(lo + chunk, data.n_series))
        batch = data.window(starts, series)
        if model.config.kind == "recurrent-ar":
            items = int(np.swapaxes(batch.target_mask, -1, -2).all(axis=-1).sum())
        else:
            items = int(batch.target_mask.all(axis=-1).sum())
        if items == 0:
            continue
        value, _ = batch_loss(model, data, batch, loss_fn, noise_rng=noise, with_grad=False)
        total += value * items
        count += items
    return total / count if count else float("nan")


# --------------------------------------------------------------------------
# training loop


def train(model_config: ModelConfig | None, train_config: TrainConfig, data: PanelDataset, loss_id: str,
          log=None):
    """Fit a model; returns ``(best_model, history)``.

    Each update accumulates ``batch_size`` slices of ``slice_size`` series.
    The learning rate is multiplied by ``lr_factor`` whenever the running
    training loss has not improved for ``plateau_patience_updates`` updates;
    training stops after ``max_updates`` updates or ``early_stop_epochs``
    epochs without validation improvement. The returned model is the one with
    the lowest validation loss.

    Raises ``Diverged`` when the training loss is non-finite for 50
    consecutive batches.
    """
    cfg = train_config
    loss_fn = make_loss(loss_id, cfg.energy_samples)
    if model_config is None:
        model_config = ModelConfig.for_dataset(data)
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    model = build_model(model_config, rng=np.random.default_rng(seeds[0]))
    data_rng, drop_rng, noise_rng = (np.random.default_rng(s) for s in seeds[1:])
    history = TrainHistory()
    best = model.copy()
    if cfg.max_updates == 0:
        return best, history

    state = AdamState.zeros_like(model.params)
    lr = cfg.learning_rate
    updates = 0
    bad_streak = 0
    running = best_running = np.inf
    since_plateau = 0
    best_valid = best_stop = np.inf
    stale_epochs = 0
    epoch = 0
    while updates < cfg.max_updates:
        tic = time.perf_counter()
        losses = []
        for _ in range(cfg.batches_per_epoch):
            if updates >= cfg.max_updates:
                break
            batch = sample_training_batch(data, cfg.slice_size, data_rng, n_slices=cfg.batch_size)
            try:
                value, grads = batch_loss(model, data, batch, loss_fn, training=True, rng=drop_rng,
                                          noise_rng=noise_rng)
                finite = np.isfinite(value) and all(np.all(np.isfinite(g)) for g in grads.values())
            except MVGError:
                finite = False
            if not finite:
                bad_streak += 1
                history.skipped_steps += 1
                if bad_streak >= DIVERGENCE_STREAK:
                    raise Diverged(f"training loss non-finite for {bad_streak} consecutive batches", history)
                continue
            bad_streak = 0
            adam_step(model.params, clip_gradients(grads, cfg.clip_norm), state, lr, cfg.l2)
            updates += 1
            losses.append(value)
            running = value if not np.isfinite(running) else \
                (1.0 - PLATEAU_SMOOTHING) * running + PLATEAU_SMOOTHING * value
            if running < best_running - IMPROVEMENT:
                best_running = running
                since_plateau = 0
            else:
                since_plateau += 1
                if since_plateau >= cfg.plateau_patience_updates:
                    lr *= cfg.lr_factor
                    since_plateau = 0
        if not losses:
            # a whole epoch of skipped batches: nothing to validate
            epoch += 1
            continue
        valid = validation_loss(model, data, loss_fn, chunk=cfg.slice_size, noise_seed=cfg.seed)
        history.append(epoch=epoch, train_loss=float(np.mean(losses)), valid_loss=float(valid), lr=lr,
                       updates=updates, seconds=time.perf_counter() - tic)
        if log is not None:
            log(f"epoch {epoch}: train {np.mean(losses):.5f} valid {valid:.5f} lr {lr:.2e} updates {updates}")
        if np.isfinite(valid) and valid < best_valid:
            best_valid = valid
            best = model.copy()
            history.best_epoch = len(history) - 1
        if valid < best_stop - IMPROVEMENT:
            best_stop = valid
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= cfg.early_stop_epochs:
                break
        epoch += 1
    return best, history
