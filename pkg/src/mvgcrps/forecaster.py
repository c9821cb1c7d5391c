"""Forecasting networks that emit low-rank-plus-diagonal Gaussian parameters.

Two models share the same output heads (affine maps from a hidden state to
the mean, the diagonal term and one row of the low-rank factor):

* ``RecurrentAR``: a stacked GRU run per series; at each step the heads of
  the ``B`` series in a slice form one ``B``-dimensional Gaussian.
* ``MLPSeq2Seq``: a feed-forward net over the flattened context that emits a
  hidden state per horizon step; the heads form one ``Q``-dimensional
  Gaussian per series.

Gradients are computed by hand (``backward``) so the analytic loss gradients
from :mod:`mvgcrps.scoring` plug straight in.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch
from .mvg import MVGaussianParams, densify_arrays, sample_dense

D_FLOOR = 1e-6
MODEL_KINDS = ("recurrent-ar", "mlp-seq2seq")
CHECKPOINT_MAGIC = b"MVGCKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "recurrent-ar"
    hidden_size: int = 40
    n_layers: int = 2
    rank: int = 10
    context_length: int = 24
    prediction_length: int = 24
    dropout: float = 0.01
    input_size: int = 1
    lags: tuple = (1,)
    input_scale: tuple = (1.0,)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.context_length != self.prediction_length:
            raise ValueError("context length must equal prediction length")
        if len(self.input_scale) != self.input_size:
            raise ValueError("input_scale must have one entry per input feature")
        object.__setattr__(self, "lags", tuple(int(k) for k in self.lags))
        object.__setattr__(self, "input_scale", tuple(float(s) for s in self.input_scale))

    @classmethod
    def for_dataset(cls, data, kind: str = "recurrent-ar", **overrides) -> "ModelConfig":
        from .data import feature_scale

        P = data.split.P
        scale = feature_scale(data.panel.frequency, data.n_series)
        if kind == "mlp-seq2seq":
            # flattened context, then calendar/id covariates
            scale = np.concatenate([np.ones(P), scale[len(data.lags):]])
        cfg = cls(kind=kind, context_length=P, prediction_length=data.split.Q,
                  input_size=len(scale), lags=data.lags, input_scale=tuple(scale))
        return replace(cfg, **overrides)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lags"] = list(self.lags)
        out["input_scale"] = list(self.input_scale)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "lags": tuple(d["lags"]), "input_scale": tuple(d["input_scale"])})


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _dropout_mask(rng, shape, rate):
    if rng is None or rate <= 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


class _Model:
    """Parameter storage and the shared Gaussian heads."""

    config: ModelConfig
    params: dict

    def _init_heads(self, rng):
        H, R = self.config.hidden_size, self.config.rank
        p = self.params
        p["head_mu_w"] = _uniform(rng, H, (H,))
        p["head_mu_b"] = _uniform(rng, H, ())
        p["head_d_w"] = _uniform(rng, H, (H,))
        p["head_d_b"] = _uniform(rng, H, ())
        p["head_l_w"] = _uniform(rng, H, (H, R))
        p["head_l_b"] = _uniform(rng, H, (R,))

    def _heads(self, h):
        p = self.params
        mu = h @ p["head_mu_w"] + p["head_mu_b"]
        pre_d = h @ p["head_d_w"] + p["head_d_b"]
        sp = _softplus(pre_d)
        d = np.maximum(sp, D_FLOOR)
        lrow = h @ p["head_l_w"] + p["head_l_b"]
        return mu, d, lrow, (h, pre_d, sp)

    def _heads_backward(self, cache, gmu, gd, gl, grads):
        h, pre_d, sp = cache
        p = self.params
        gpre = gd * _sigmoid(pre_d) * (sp > D_FLOOR)
        hf = h.reshape(-1, h.shape[-1])
        grads["head_mu_w"] = hf.T @ gmu.reshape(-1)
        grads["head_mu_b"] = np.asarray(gmu.sum())
        grads["head_d_w"] = hf.T @ gpre.reshape(-1)
        grads["head_d_b"] = np.asarray(gpre.sum())
        grads["head_l_w"] = hf.T @ gl.reshape(-1, gl.shape[-1])
        grads["head_l_b"] = gl.reshape(-1, gl.shape[-1]).sum(axis=0)
        return gmu[..., None] * p["head_mu_w"] + gpre[..., None] * p["head_d_w"] + gl @ p["head_l_w"].T

    def zero_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def copy(self):
        other = object.__new__(type(self))
        other.config = self.config
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


class RecurrentAR(_Model):
    """Stacked GRU shared across series; input at step t holds lags of z before t."""

    def __init__(self, config: ModelConfig, rng=0):
        if config.kind != "recurrent-ar":
            raise ValueError("RecurrentAR needs kind='recurrent-ar'")
        rng = np.random.default_rng(rng)
        self.config = config
        self.params = {}
        H = config.hidden_size
        for layer in range(config.n_layers):
            fan = config.input_size if layer == 0 else H
            self.params[f"gru{layer}_wx"] = _uniform(rng, H, (fan, 3 * H))
            self.params[f"gru{layer}_wh"] = _uniform(rng, H, (H, 3 * H))
            self.params[f"gru{layer}_bx"] = _uniform(rng, H, (3 * H,))
            self.params[f"gru{layer}_bh"] = _uniform(rng, H, (3 * H,))
        self._init_heads(rng)

    def _check(self, features):
        if features.shape[-1] != self.config.input_size:
            raise ShapeMismatch(f"expected {self.config.input_size} input features, got {features.shape[-1]}")

    def _gru_layer(self, layer, x, h0):
        """Run one layer over a time-major sequence ``x`` (T, rows, in); returns outputs and cache."""
        p = self.params
        H = self.config.hidden_size
        wh, bh = p[f"gru{layer}_wh"], p[f"gru{layer}_bh"]
        gx = x @ p[f"gru{layer}_wx"] + p[f"gru{layer}_bx"]
        T, rows, _ = x.shape
        hs = np.empty((T + 1, rows, H))
        hs[0] = h0
        r = np.empty((T, rows, H))
        z = np.empty((T, rows, H))
        n = np.empty((T, rows, H))
        ghn = np.empty((T, rows, H))
        for t in range(T):
            gh = hs[t] @ wh + bh
            rz = _sigmoid(gx[t, :, :2 * H] + gh[:, :2 * H])
            r[t] = rz[:, :H]
            z[t] = rz[:, H:]
            ghn[t] = gh[:, 2 * H:]
            n[t] = np.tanh(gx[t, :, 2 * H:] + r[t] * ghn[t])
            hs[t + 1] = n[t] + z[t] * (hs[t] - n[t])
        return hs[1:], (x, hs, r, z, n, ghn)

    def _gru_layer_backward(self, layer, cache, gout, grads):
        x, hs, r, z, n, ghn = cache
        p = self.params
        H = self.config.hidden_size
        wh = p[f"gru{layer}_wh"]
        T, rows, _ = gout.shape
        ggx = np.empty((T, rows, 3 * H))
        ggh = np.empty((T, rows, 3 * H))
        carry = np.zeros((rows, H))
        for t in range(T - 1, -1, -1):
            gh = gout[t] + carry
            zt, nt, rt = z[t], n[t], r[t]
            gn = gh * (1.0 - zt) * (1.0 - nt * nt)
            ggx[t, :, :H] = gn * ghn[t] * rt * (1.0 - rt)
            ggx[t, :, H:2 * H] = gh * (hs[t] - nt) * zt * (1.0 - zt)
            ggx[t, :, 2 * H:] = gn
            ggh[t, :, :2 * H] = ggx[t, :, :2 * H]
            ggh[t, :, 2 * H:] = gn * rt
            carry = gh * zt + ggh[t] @ wh.T
        flat_x = x.reshape(-1, x.shape[-1])
        flat_g = ggx.reshape(-1, 3 * H)
        flat_gh = ggh.reshape(-1, 3 * H)
        grads[f"gru{layer}_wx"] = flat_x.T @ flat_g
        grads[f"gru{layer}_bx"] = flat_g.sum(axis=0)
        grads[f"gru{layer}_wh"] = hs[:-1].reshape(-1, H).T @ flat_gh
        grads[f"gru{layer}_bh"] = flat_gh.sum(axis=0)
        return (flat_g @ p[f"gru{layer}_wx"].T).reshape(x.shape)

    def forward(self, features, training=False, rng=None):
        """Teacher-forced pass over ``features`` (..., B, T, F).

        Returns ``mu, d`` shaped (..., B, T), ``L`` shaped (..., B, T, R) and a
        cache for :meth:`backward`. Dropout is applied between GRU layers only
        when ``training`` and an ``rng`` is given.
        """
        features = np.asarray(features, dtype=np.float64)
        self._check(features)
        lead = features.shape[:-2]
        x = (features * np.asarray(self.config.input_scale)).reshape((-1,) + features.shape[-2:])
        x = np.ascontiguousarray(np.swapaxes(x, 0, 1))  # time-major for the recurrence
        H = self.config.hidden_size
        caches, masks = [], []
        for layer in range(self.config.n_layers):
            if layer > 0:
                mask = _dropout_mask(rng if training else None, x.shape, self.config.dropout)
                masks.append(mask)
                if mask is not None:
                    x = x * mask
            x, cache = self._gru_layer(layer, x, np.zeros((x.shape[1], H)))
            caches.append(cache)
        mu, d, lrow, hcache = self._heads(np.swapaxes(x, 0, 1))
        T = features.shape[-2]
        out = (mu.reshape(lead + (T,)), d.reshape(lead + (T,)), lrow.reshape(lead + (T, -1)))
        return out + ((caches, masks, hcache, lead),)

    def backward(self, cache, gmu, gd, gl) -> dict:
        caches, masks, hcache, lead = cache
        grads = {}
        rows = int(np.prod(lead))
        T = gmu.shape[-1]
        g = self._heads_backward(hcache, gmu.reshape(rows, T), gd.reshape(rows, T),
                                 gl.reshape(rows, T, -1), grads)
        g = np.ascontiguousarray(np.swapaxes(g, 0, 1))
        for layer in range(self.config.n_layers - 1, -1, -1):
            g = self._gru_layer_backward(layer, caches[layer], g, grads)
            if layer > 0 and masks[layer - 1] is not None:
                g = g * masks[layer - 1]
        return grads

    def step(self, x, hidden):
        """One inference step for inputs ``x`` (rows, F); ``hidden`` is a list of (rows, H)."""
        p = self.params
        H = self.config.hidden_size
        inp = x * np.asarray(self.config.input_scale)
        new = []
        for layer, h in enumerate(hidden):
            gx = inp @ p[f"gru{layer}_wx"] + p[f"gru{layer}_bx"]
            gh = h @ p[f"gru{layer}_wh"] + p[f"gru{layer}_bh"]
            r = _sigmoid(gx[:, :H] + gh[:, :H])
            z = _sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
            n = np.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
            inp = (1.0 - z) * n + z * h
            new.append(inp)
        mu, d, lrow, _ = self._heads(inp)
        return mu, d, lrow, new


class MLPSeq2Seq(_Model):
    """Feed-forward net over the flattened context emitting one hidden state per horizon step."""

    def __init__(self, config: ModelConfig, rng=0):
        if config.kind != "mlp-seq2seq":
            raise ValueError("MLPSeq2Seq needs kind='mlp-seq2seq'")
        rng = np.random.default_rng(rng)
        self.config = config
        self.params = {}
        H, Q = config.hidden_size, config.prediction_length
        sizes = [config.input_size] + [H] * (config.n_layers - 1) + [Q * H]
        for k in range(config.n_layers):
            self.params[f"mlp{k}_w"] = _uniform(rng, sizes[k], (sizes[k], sizes[k + 1]))
            self.params[f"mlp{k}_b"] = _uniform(rng, sizes[k], (sizes[k + 1],))
        self._init_heads(rng)

    def forward(self, inputs, training=False, rng=None):
        """``inputs`` (..., F) -> ``mu, d`` (..., Q), ``L`` (..., Q, R) and a cache."""
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.shape[-1] != self.config.input_size:
            raise ShapeMismatch(f"expected {self.config.input_size} inputs, got {inputs.shape[-1]}")
        lead = inputs.shape[:-1]
        x = (inputs * np.asarray(self.config.input_scale)).reshape(-1, inputs.shape[-1])
        acts, masks = [x], []
        for k in range(self.config.n_layers):
            x = np.tanh(x @ self.params[f"mlp{k}_w"] + self.params[f"mlp{k}_b"])
            mask = None
            if k < self.config.n_layers - 1:
                mask = _dropout_mask(rng if training else None, x.shape, self.config.dropout)
                if mask is not None:
                    x = x * mask
            masks.append(mask)
            acts.append(x)
        Q, H = self.config.prediction_length, self.config.hidden_size
        h = x.reshape(-1, Q, H)
        mu, d, lrow, hcache = self._heads(h)
        out = (mu.reshape(lead + (Q,)), d.reshape(lead + (Q,)), lrow.reshape(lead + (Q, -1)))
        return out + ((acts, masks, hcache, lead),)

    def backward(self, cache, gmu, gd, gl) -> dict:
        acts, masks, hcache, lead = cache
        Q = self.config.prediction_length
        grads = {}
        rows = int(np.prod(lead))
        g = self._heads_backward(hcache, gmu.reshape(rows, Q), gd.reshape(rows, Q),
                                 gl.reshape(rows, Q, -1), grads).reshape(rows, -1)
        for k in range(self.config.n_layers - 1, -1, -1):
            out = acts[k + 1]
            if masks[k] is not None:
                g = g * masks[k]
                out = out / np.where(masks[k] == 0, 1.0, masks[k])
            g = g * (1.0 - out * out)
            grads[f"mlp{k}_w"] = acts[k].T @ g
            grads[f"mlp{k}_b"] = g.sum(axis=0)
            g = g @ self.params[f"mlp{k}_w"].T
        return grads


def build_model(config: ModelConfig, rng=0):
    return RecurrentAR(config, rng) if config.kind == "recurrent-ar" else MLPSeq2Seq(config, rng)


# --------------------------------------------------------------------------
# functional entry points


def forward_ar(model: RecurrentAR, features) -> list[MVGaussianParams]:
    """Per-step Gaussians over the ``B`` series of a window ``features`` (B, T, F)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3:
        raise ShapeMismatch("forward_ar expects a single window shaped (B, T, F)")
    mu, d, lrow, _ = model.forward(features)
    return [MVGaussianParams.from_arrays(mu[:, t], d[:, t], lrow[:, t]) for t in range(mu.shape[1])]


def forward_seq2seq(model: MLPSeq2Seq, inputs) -> MVGaussianParams:
    """Joint Gaussian over the horizon for one series' flattened context ``inputs`` (F,)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 1:
        raise ShapeMismatch("forward_seq2seq expects a single input vector")
    mu, d, lrow, _ = model.forward(inputs)
    return MVGaussianParams.from_arrays(mu, d, lrow)


@dataclass
class ARContext:
    """Conditioning data for ancestral sampling of ``B`` series.

    ``history`` holds normalized values (H, B) ending just before the first
    forecast step; ``covariates`` holds the calendar and id features for the
    history and the ``Q`` future steps, (H + Q, B, C).
    """

    history: np.ndarray
    covariates: np.ndarray


def ar_context(data, start: int, series) -> ARContext:
    """Context for forecasting from ``start`` (time index of the first forecast step)."""
    series = np.asarray(series, dtype=np.int64)
    lo = start - data.split.P - data.max_lag
    if lo < 0:
        raise ValueError("not enough history before the forecast start")
    Q = data.split.Q
    n_lags = len(data.lags)
    hist = data.inputs[lo:start][:, series]
    cov = data.features[lo:start + Q][:, series, n_lags:]
    return ARContext(hist, cov)


def forecast_ar(model: RecurrentAR, context: ARContext, Q: int, num_samples: int, rng=0,
                noise_scale: float = 1.0, return_params: bool = False):
    """Ancestral sample paths ``(num_samples, Q, B)`` in normalized units.

    The network is warmed up on the last ``P`` history steps, then each drawn
    value is fed back as the next lag input. With ``noise_scale=0`` the path is
    the iterated conditional mean. ``return_params`` additionally returns the
    per-step ``(mu, d, L)`` arrays shaped ``(num_samples, Q, B[, R])``.
    """
    if Q < 1 or num_samples < 1:
        raise ValueError("Q and num_samples must be positive")
    cfg = model.config
    rng = np.random.default_rng(rng)
    lags = cfg.lags
    hist = np.asarray(context.history, dtype=np.float64)
    cov = np.asarray(context.covariates, dtype=np.float64)
    Hn, B = hist.shape
    P = cfg.context_length
    if Hn < P + max(lags) or cov.shape[0] < Hn + Q:
        raise ShapeMismatch("context too short for the configured lags, context length and horizon")

    def feats(buf, t):
        lagged = np.stack([buf[..., t - k] for k in lags], axis=-1)
        c = np.broadcast_to(cov[t], (buf.shape[0],) + cov[t].shape)
        return np.concatenate([lagged, c], axis=-1).reshape(-1, cfg.input_size)

    # warm-up on the observed conditioning range (no need to keep params)
    buf = hist[None, :, :].transpose(0, 2, 1)  # (1, B, Hn)
    hidden = [np.zeros((B, cfg.hidden_size)) for _ in range(cfg.n_layers)]
    for t in range(Hn - P, Hn):
        *_, hidden = model.step(feats(buf, t), hidden)
    hidden = [np.repeat(h[None], num_samples, axis=0).reshape(num_samples * B, -1) for h in hidden]
    buf = np.concatenate([np.repeat(buf, num_samples, axis=0), np.zeros((num_samples, B, Q))], axis=-1)
    out_params = []
    for q in range(Q):
        t = Hn + q
        mu, d, lrow, hidden = model.step(feats(buf, t), hidden)
        mu = mu.reshape(num_samples, B)
        d = d.reshape(num_samples, B)
        lrow = lrow.reshape(num_samples, B, -1)
        if noise_scale == 0.0:
            draw = mu
        else:
            sigma = densify_arrays(d, lrow) * noise_scale**2
            draw = sample_dense(mu, sigma, 1, rng)[0]
        buf[:, :, t] = draw
        if return_params:
            out_params.append((mu, d, lrow))
    paths = buf[:, :, Hn:].transpose(0, 2, 1)
    if not return_params:
        return paths
    mus, ds, ls = zip(*out_params)
    return paths, (np.stack(mus, 1), np.stack(ds, 1), np.stack(ls, 1))


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, extra: dict | None = None) -> None:
    """Binary checkpoint: magic, version, JSON header (config + tensor manifest), raw float64 data."""
    manifest, offset, blobs = [], 0, []
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"version": CHECKPOINT_VERSION, "config": model.config.to_dict(),
                         "tensors": manifest, "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, extra)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    body = raw[20 + hlen:]
    config = ModelConfig.from_dict(header["config"])
    model = build_model(config, rng=0)
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=entry["offset"])
        model.params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return model, header.get("extra", {})
