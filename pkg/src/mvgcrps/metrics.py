"""Sample-based evaluation: empirical CRPS, CRPS_sum, energy score, rolling backtests."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import PanelDataset
from .errors import ShapeMismatch, SingularDesign
from .forecaster import ar_context, forecast_ar
from .mvg import densify_arrays, sample_dense
from .scoring import energy_score_from_samples
from .var import fit_var1

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
HEATMAP_CLIP = (0.0, 0.6)
_ES_CHUNK = 512


def empirical_crps(samples, obs):
    """``mean|Z - z| - 1/(2 M^2) sum_ij |Z_i - Z_j|`` over the first axis of ``samples``.

    The double sum is computed from the sorted samples in O(M log M).
    ``obs`` broadcasts against ``samples[0]``.
    """
    s = np.sort(np.asarray(samples, dtype=np.float64), axis=0)
    m = s.shape[0]
    if m < 1:
        raise ValueError("need at least one sample")
    obs = np.asarray(obs, dtype=np.float64)
    first = np.mean(np.abs(s - obs), axis=0)
    weights = (2.0 * np.arange(1, m + 1) - m - 1).reshape((m,) + (1,) * (s.ndim - 1))
    spread = np.sum(weights * s, axis=0) / (m * m)
    out = first - spread
    return float(out) if np.ndim(out) == 0 else out


def crps_sum(paths, obs, mask=None) -> float:
    """CRPS of the across-series sum, averaged over time steps.

    ``paths`` is ``(M, Q, N)``, ``obs`` ``(Q, N)``. With a ``mask`` only
    observed series enter both sums, and steps with nothing observed are
    skipped.
    """
    paths = np.asarray(paths, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if paths.ndim != 3 or paths.shape[1:] != obs.shape:
        raise ShapeMismatch(f"paths {paths.shape} do not match observations {obs.shape}")
    if mask is None:
        mask = np.ones(obs.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    keep = mask.any(axis=1)
    if not keep.any():
        return float("nan")
    path_sum = np.where(mask, paths, 0.0).sum(axis=2)
    obs_sum = np.where(mask, obs, 0.0).sum(axis=1)
    per_step = empirical_crps(path_sum, obs_sum)
    return float(np.mean(np.atleast_1d(per_step)[keep]))


def energy_score_metric(paths, obs, beta: float = 1.0) -> float:
    """Energy score of ``paths`` (M, N) for ``obs`` (N,), splitting the samples into two halves."""
    paths = np.asarray(paths, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    m = paths.shape[0]
    if m < 2 or m % 2:
        raise ValueError("energy score metric needs an even number of samples >= 2")
    half = m // 2
    first, second = paths[:half], paths[half:]
    if half <= _ES_CHUNK:
        return float(energy_score_from_samples(first, second, obs, beta))
    # large sample sets: accumulate the pairwise term block by block
    term1 = np.mean(np.linalg.norm(first - obs, axis=-1) ** beta)
    # centre on the observation to limit cancellation in the Gram identity
    first, second = first - obs, second - obs
    n1 = np.sum(first * first, 1)
    n2 = np.sum(second * second, 1)
    pair = 0.0
    # cache-sized tiles; one big row block would stream gigabytes per pass
    for lo in range(0, half, _ES_CHUNK):
        a, na = first[lo:lo + _ES_CHUNK], n1[lo:lo + _ES_CHUNK, None]
        for lo2 in range(0, half, _ES_CHUNK):
            sq = a @ second[lo2:lo2 + _ES_CHUNK].T
            sq *= -2.0
            sq += n2[lo2:lo2 + _ES_CHUNK]
            sq += na
            np.maximum(sq, 0.0, out=sq)
            np.sqrt(sq, out=sq)
            if beta != 1.0:
                sq **= beta
            pair += sq.sum()
    return float(term1 - pair / (2.0 * half * half))


def covariance_diagnostics(sigma) -> dict:
    """Trace, largest eigenvalue and largest absolute off-diagonal entry of each matrix in a stack."""
    sigma = np.asarray(sigma, dtype=np.float64)
    n = sigma.shape[-1]
    off = np.abs(sigma) * (1.0 - np.eye(n))
    return {
        "trace": np.trace(sigma, axis1=-2, axis2=-1),
        "max_eig": np.linalg.eigvalsh(sigma)[..., -1],
        "max_offdiag": off.max(axis=(-2, -1)) if n > 1 else np.zeros(sigma.shape[:-2]),
    }


# --------------------------------------------------------------------------
# forecasters: sample(start, M, rng) -> (normalized paths (M, Q, N), covariance blocks)


class NeuralAR:
    """Joint ancestral sampling of all series with a recurrent model.

    Covariance blocks are the per-step ``N x N`` predictive matrices along
    the iterated conditional-mean path.
    """

    def __init__(self, model, data: PanelDataset):
        self.model, self.data = model, data

    def sample(self, start, num_samples, rng):
        ctx = ar_context(self.data, start, np.arange(self.data.n_series))
        Q = self.data.split.Q
        paths = forecast_ar(self.model, ctx, Q, num_samples, rng)
        _, (mu, d, lrow) = forecast_ar(self.model, ctx, Q, 1, 0, noise_scale=0.0, return_params=True)
        return paths, densify_arrays(d[0], lrow[0])


class NeuralSeq2Seq:
    """One joint horizon Gaussian per series; covariance blocks are the ``Q x Q`` matrices per series."""

    def __init__(self, model, data: PanelDataset):
        self.model, self.data = model, data

    def sample(self, start, num_samples, rng):
        batch = self.data.window([start], np.arange(self.data.n_series))
        mu, d, lrow, _ = self.model.forward(self.data.seq2seq_inputs(batch))
        sigma = densify_arrays(d[0], lrow[0])
        draws = sample_dense(mu[0], sigma, num_samples, rng)  # (M, N, Q)
        return np.swapaxes(draws, 1, 2), sigma


class VarForecaster:
    """VAR(1) fitted on the normalized training span; predictive covariance propagated per step."""

    def __init__(self, data: PanelDataset):
        if data.n_series < 2:
            raise SingularDesign("VAR baseline needs at least two series")
        self.data = data
        self.model = fit_var1(data.inputs[: data.split.train_end])

    def sample(self, start, num_samples, rng):
        from .var import forecast_var1

        Q = self.data.split.Q
        paths = forecast_var1(self.model, self.data.inputs[start - 1], Q, num_samples, rng)
        a, cov = self.model.A, self.model.noise_cov
        blocks = [cov]
        for _ in range(Q - 1):
            blocks.append(a @ blocks[-1] @ a.T + cov)
        return paths, np.stack(blocks)


class NaiveZero:
    """Standard-normal draws in normalized units: the training mean with the training spread."""

    def __init__(self, data: PanelDataset):
        self.data = data

    def sample(self, start, num_samples, rng):
        Q, N = self.data.split.Q, self.data.n_series
        paths = np.random.default_rng(rng).standard_normal((num_samples, Q, N))
        return paths, np.broadcast_to(np.eye(N), (Q, N, N))


def make_forecaster(model, data: PanelDataset):
    if model.config.kind == "recurrent-ar":
        return NeuralAR(model, data)
    return NeuralSeq2Seq(model, data)


# --------------------------------------------------------------------------
# rolling evaluation


@dataclass
class EvalReport:
    name: str
    starts: list
    crps_sum_per_window: list
    crps_sum: float  # mean over steps within a window, then over windows
    crps_sum_pooled: float  # mean over all (window, step) pairs
    energy_score_per_window: list
    energy_score: float
    trace: list  # [window][block]
    max_eig: list
    max_offdiag: list
    median_max_eig: float
    num_samples: int
    train_seconds_per_epoch: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate_rolling(forecaster, data: PanelDataset, num_samples: int = 100, rng=0, name: str = "model",
                     fan_path=None, heatmap_path=None) -> EvalReport:
    """Forecast from every test start point, de-normalize and score.

    Each start point gets its own RNG stream spawned from ``rng`` so results
    do not depend on evaluation order. Optionally writes quantile fans and
    the first window's covariance heatmaps (clipped to [0, 0.6]) as CSV.
    """
    if num_samples < 2 or num_samples % 2:
        raise ValueError("num_samples must be even and at least 2")
    starts = data.split.test_starts()
    Q = data.split.Q
    streams = np.random.SeedSequence(rng).spawn(len(starts))
    scaler = data.scaler
    per_window, pooled, energy = [], [], []
    traces, eigs, offs = [], [], []
    fans = []
    for k, (start, stream) in enumerate(zip(starts, streams)):
        paths_n, blocks = forecaster.sample(int(start), num_samples, np.random.default_rng(stream))
        paths = scaler.denormalize(paths_n)
        obs = data.panel.values[start:start + Q]
        mask = np.isfinite(obs)
        obs0 = np.where(mask, obs, 0.0)
        path_sum = np.where(mask, paths, 0.0).sum(axis=2)
        step_crps = np.atleast_1d(empirical_crps(path_sum, np.where(mask, obs0, 0.0).sum(axis=1)))
        keep = mask.any(axis=1)
        per_window.append(float(np.mean(step_crps[keep])) if keep.any() else float("nan"))
        pooled.extend(step_crps[keep].tolist())
        es = [energy_score_metric(paths[:, q][:, mask[q]], obs[q][mask[q]]) for q in range(Q) if mask[q].any()]
        energy.append(float(np.mean(es)) if es else float("nan"))
        diag = covariance_diagnostics(blocks)
        traces.append(diag["trace"].tolist())
        eigs.append(diag["max_eig"].tolist())
        offs.append(diag["max_offdiag"].tolist())
        if fan_path is not None:
            qs = np.quantile(paths, QUANTILES, axis=0)  # (5, Q, N)
            for q in range(Q):
                for i in range(data.n_series):
                    fans.append([k, int(start), q, str(data.panel.timestamps[start + q]), data.panel.series_ids[i],
                                 *[repr(float(v)) for v in qs[:, q, i]],
                                 repr(float(obs[q, i])) if mask[q, i] else ""])
        if heatmap_path is not None and k == 0:
            _write_heatmap(heatmap_path, blocks)
    if fan_path is not None:
        with open(fan_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["window", "start", "step", "timestamp", "series"]
                       + [f"q{int(round(100 * q)):02d}" for q in QUANTILES] + ["observed"])
            w.writerows(fans)
    return EvalReport(
        name=name,
        starts=[int(s) for s in starts],
        crps_sum_per_window=per_window,
        crps_sum=float(np.nanmean(per_window)),
        crps_sum_pooled=float(np.mean(pooled)) if pooled else float("nan"),
        energy_score_per_window=energy,
        energy_score=float(np.nanmean(energy)),
        trace=traces,
        max_eig=eigs,
        max_offdiag=offs,
        median_max_eig=float(np.median(np.asarray(eigs))),
        num_samples=num_samples,
    )


def _write_heatmap(path, blocks) -> None:
    lo, hi = HEATMAP_CLIP
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block", "row", "col", "value"])
        for b, mat in enumerate(np.asarray(blocks)):
            for (i, j), v in np.ndenumerate(np.clip(mat, lo, hi)):
                w.writerow([b, i, j, repr(float(v))])
