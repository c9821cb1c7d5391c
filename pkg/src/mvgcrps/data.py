"""Panel time series: CSV I/O, synthetic generation, splits, scaling, features, batches."""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InsufficientHistory, IrregularFrequency, ParseError

FIXED_STEPS = {"half-hourly": 1800, "hourly": 3600, "daily": 86400, "weekly": 7 * 86400}
MONTH_STEPS = {"monthly": 1, "quarterly": 3, "yearly": 12}
FREQUENCIES = tuple(FIXED_STEPS) + tuple(MONTH_STEPS)

LAGS = {
    "half-hourly": (1, 2, 4, 12, 24, 48),
    "hourly": (1, 24, 168),
    "daily": (1, 7, 14),
}
COVARIATES = {
    "half-hourly": ("hour_of_day", "day_of_week"),
    "hourly": ("hour_of_day", "day_of_week"),
    "daily": ("day_of_week",),
}
# context/horizon and rolling start points used when a manifest does not say otherwise
DEFAULT_WINDOWS = {
    "half-hourly": (48, 7),
    "hourly": (24, 7),
    "daily": (30, 5),
    "weekly": (8, 5),
    "monthly": (12, 3),
    "quarterly": (8, 3),
    "yearly": (6, 3),
}
SEASONAL_PERIOD = {"half-hourly": 48, "hourly": 24, "daily": 7}
STD_FLOOR = 1e-6
MAX_OFF_GRID = 0.01


def lags_for(frequency: str) -> tuple[int, ...]:
    return LAGS.get(frequency, (1,))


def covariates_for(frequency: str) -> tuple[str, ...]:
    return COVARIATES.get(frequency, ())


@dataclass
class PanelSeries:
    values: np.ndarray  # (T, N), NaN where missing
    timestamps: np.ndarray  # datetime64[s], (T,)
    frequency: str
    series_ids: list[str]
    contaminated: np.ndarray | None = None  # (T,) bool, synthetic panels only

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[s]")
        if self.values.ndim != 2 or self.values.shape[1] < 1:
            raise ValueError("values must be a (T, N) matrix with N >= 1")
        if len(self.timestamps) != len(self.values) or len(self.series_ids) != self.values.shape[1]:
            raise ValueError("timestamps / series ids do not match the value matrix")
        if self.frequency not in FREQUENCIES:
            raise ValueError(f"unknown frequency {self.frequency!r}")
        if np.any(np.diff(self.timestamps.astype(np.int64)) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    @property
    def mask(self) -> np.ndarray:
        return np.isfinite(self.values)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_series(self) -> int:
        return self.values.shape[1]


# --------------------------------------------------------------------------
# CSV


def _grid_positions(ts: np.ndarray, frequency: str) -> np.ndarray:
    """Position of each timestamp on the regular grid anchored at the first one (float)."""
    if frequency in FIXED_STEPS:
        secs = (ts - ts[0]).astype("timedelta64[s]").astype(np.int64)
        return secs / FIXED_STEPS[frequency]
    months = ts.astype("datetime64[M]").astype(np.int64)
    return (months - months[0]) / MONTH_STEPS[frequency]


def infer_frequency(ts: np.ndarray) -> str:
    if len(ts) < 2:
        raise IrregularFrequency("need at least two timestamps to infer a frequency")
    deltas = np.diff(ts.astype("datetime64[s]").astype(np.int64))
    modal = Counter(deltas.tolist()).most_common(1)[0][0]
    for name, step in FIXED_STEPS.items():
        if modal == step:
            return name
    days = modal / 86400
    if 28 <= days <= 31:
        return "monthly"
    if 89 <= days <= 92:
        return "quarterly"
    if 365 <= days <= 366:
        return "yearly"
    raise IrregularFrequency(f"unsupported sampling interval of {modal} seconds")


def _regularize(ts: np.ndarray, values: np.ndarray, frequency: str):
    pos = _grid_positions(ts, frequency)
    steps = np.diff(pos)
    off_grid = np.mean(steps != 1.0) if len(steps) else 0.0
    if off_grid > MAX_OFF_GRID:
        raise IrregularFrequency(f"{off_grid:.1%} of timestamp deltas are off the {frequency} grid")
    if np.any(pos != np.round(pos)):
        raise IrregularFrequency("timestamps do not fall on a regular grid")
    idx = np.round(pos).astype(np.int64)
    total = int(idx[-1]) + 1
    if total == len(ts):
        return ts, values
    full = np.full((total, values.shape[1]), np.nan)
    full[idx] = values
    if frequency in FIXED_STEPS:
        grid = ts[0] + np.arange(total) * np.timedelta64(FIXED_STEPS[frequency], "s")
    else:
        month0 = ts[0].astype("datetime64[M]")
        grid = (month0 + np.arange(total) * MONTH_STEPS[frequency]).astype("datetime64[s]")
        grid[idx] = ts
    return grid, full


def load_csv(path) -> PanelSeries:
    """Read a wide CSV: timestamp column first, one column per series, blank cell = missing.

    Gaps of whole grid steps are re-inserted as missing rows, provided no
    more than 1% of the timestamp deltas differ from the modal one.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file") from None
        if len(header) < 2:
            raise ParseError("header needs a timestamp column and at least one series")
        ids = [h.strip() for h in header[1:]]
        stamps, rows = [], []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"row {row_no}: expected {len(header)} cells, got {len(row)}", row_no)
            try:
                stamps.append(np.datetime64(row[0].strip(), "s"))
            except ValueError:
                raise ParseError(f"row {row_no}, column {header[0]}: bad timestamp {row[0]!r}",
                                 row_no, header[0]) from None
            vals = []
            for col, cell in zip(ids, row[1:]):
                cell = cell.strip()
                if cell == "":
                    vals.append(np.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(f"row {row_no}, column {col}: non-numeric value {cell!r}",
                                     row_no, col) from None
            rows.append(vals)
    if not rows:
        raise ParseError("no data rows")
    ts = np.array(stamps, dtype="datetime64[s]")
    if np.any(np.diff(ts.astype(np.int64)) <= 0):
        raise IrregularFrequency("timestamps are not strictly increasing")
    values = np.array(rows, dtype=np.float64)
    frequency = infer_frequency(ts)
    ts, values = _regularize(ts, values, frequency)
    return PanelSeries(values, ts, frequency, ids)


def write_csv(panel: PanelSeries, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp"] + list(panel.series_ids))
        for t in range(panel.length):
            cells = ["" if not np.isfinite(v) else repr(float(v)) for v in panel.values[t]]
            writer.writerow([str(panel.timestamps[t])] + cells)


def write_manifest(path, name: str, frequency: str, P: int, Q: int, rolling_evals: int) -> None:
    manifest = {"name": name, "frequency": frequency, "P": P, "Q": Q, "rolling_evals": rolling_evals}
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


# --------------------------------------------------------------------------
# synthetic panels


@dataclass(frozen=True)
class ContaminationSpec:
    """Innovation outliers: on Bernoulli(outlier_prob) steps the noise is scaled by ``magnitude``.

    ``clean_after`` switches contamination off from that time index on, so a
    test span can be kept clean.
    """

    outlier_prob: float = 0.0
    magnitude: float = 1.0
    seed: int | None = None
    clean_after: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.outlier_prob < 1.0:
            raise ValueError("outlier_prob must lie in [0, 1)")
        if self.magnitude < 1.0:
            raise ValueError("magnitude must be at least 1")


def _spectral_radius(a: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(a))))


def generate_synthetic(n_series: int, length: int, spec: ContaminationSpec = ContaminationSpec(), seed=0,
                       frequency: str = "hourly", start: str = "2020-01-06T00:00:00",
                       burn_in: int = 200) -> PanelSeries:
    """Stable VAR(1) panel with seasonality and contaminated Gaussian innovations.

    ``z_t = c + A z_{t-1} + s(t) + e_t`` where ``A`` is random with spectral
    radius 0.7, ``s`` is a per-series sinusoid with a one-day period and
    ``e_t`` is correlated Gaussian noise, multiplied by ``spec.magnitude`` on
    contaminated steps.
    """
    if frequency not in FIXED_STEPS:
        raise ValueError("synthetic panels use a fixed-step frequency")
    rng = np.random.default_rng(seed)
    n = n_series
    a = rng.normal(size=(n, n))
    a *= 0.7 / _spectral_radius(a)
    level = rng.uniform(5.0, 15.0, n)
    c = (np.eye(n) - a) @ level
    amp = rng.uniform(0.5, 1.5, n)
    phase = rng.uniform(0.0, 2.0 * np.pi, n)
    period = SEASONAL_PERIOD.get(frequency)
    load = rng.normal(scale=0.5, size=(n, 2))
    noise_chol = np.linalg.cholesky(0.5 * np.eye(n) + load @ load.T)

    total = length + burn_in
    xi = rng.standard_normal((total, n))
    crng = rng if spec.seed is None else np.random.default_rng(spec.seed)
    hit = crng.random(length) < spec.outlier_prob
    if spec.clean_after is not None:
        hit[spec.clean_after:] = False
    scale = np.ones(total)
    scale[burn_in:][hit] = spec.magnitude

    z = np.empty((total, n))
    prev = level.copy()
    for t in range(total):
        season = amp * np.sin(2 * np.pi * (t - burn_in) / period + phase) if period else 0.0
        prev = c + a @ prev + season + scale[t] * (noise_chol @ xi[t])
        z[t] = prev
    ts = np.datetime64(start, "s") + np.arange(length) * np.timedelta64(FIXED_STEPS[frequency], "s")
    ids = [f"s{i}" for i in range(n)]
    return PanelSeries(z[burn_in:], ts, frequency, ids, contaminated=hit)


# --------------------------------------------------------------------------
# splits and scaling


@dataclass(frozen=True)
class SplitSpec:
    """Sequential train / validation / test split with rolling start points (stride 1).

    Validation and test each span ``Q + rolling_evals - 1`` steps.
    """

    P: int
    Q: int
    rolling_evals: int
    train_end: int
    valid_end: int
    total: int

    @classmethod
    def make(cls, total: int, P: int, Q: int, rolling_evals: int) -> "SplitSpec":
        if P != Q:
            raise ValueError("context length must equal the horizon")
        if P < 1 or rolling_evals < 1:
            raise ValueError("P, Q and rolling_evals must be positive")
        span = Q + rolling_evals - 1
        valid_end = total - span
        train_end = valid_end - span
        if train_end <= P:
            raise InsufficientHistory(f"series of length {total} too short for P=Q={P} and {rolling_evals} windows")
        return cls(P, Q, rolling_evals, train_end, valid_end, total)

    @property
    def test_span(self) -> int:
        return self.total - self.valid_end

    def test_starts(self) -> np.ndarray:
        return self.valid_end + np.arange(self.rolling_evals)

    def valid_starts(self) -> np.ndarray:
        return self.train_end + np.arange(self.rolling_evals)


@dataclass(frozen=True)
class SeriesScaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, train_values: np.ndarray) -> "SeriesScaler":
        x = np.asarray(train_values, dtype=np.float64)
        valid = np.isfinite(x)
        count = valid.sum(axis=0)
        mean = np.where(count > 0, np.where(valid, x, 0.0).sum(axis=0) / np.maximum(count, 1), 0.0)
        var = np.where(valid, (x - mean) ** 2, 0.0).sum(axis=0) / np.maximum(count, 1)
        std = np.where(count > 0, np.maximum(np.sqrt(var), STD_FLOOR), 1.0)
        return cls(mean, std)

    def normalize(self, x, series=slice(None)):
        return (np.asarray(x, dtype=np.float64) - self.mean[series]) / self.std[series]

    def denormalize(self, x, series=slice(None)):
        return np.asarray(x, dtype=np.float64) * self.std[series] + self.mean[series]


def _forward_fill(x: np.ndarray) -> np.ndarray:
    out = x.copy()
    for t in range(1, len(out)):
        miss = ~np.isfinite(out[t])
        out[t, miss] = out[t - 1, miss]
    return out


# --------------------------------------------------------------------------
# features


def time_covariates(timestamps: np.ndarray, frequency: str) -> np.ndarray:
    """Calendar covariates encoded as single values: hour in [0, 23], weekday in [0, 6] (Monday = 0)."""
    ts = np.asarray(timestamps, dtype="datetime64[s]")
    cols = []
    for name in covariates_for(frequency):
        if name == "hour_of_day":
            cols.append((ts - ts.astype("datetime64[D]")).astype("timedelta64[h]").astype(np.int64))
        else:
            days = ts.astype("datetime64[D]").astype(np.int64)
            cols.append((days + 3) % 7)
    return np.stack(cols, axis=-1).astype(np.float64) if cols else np.zeros((len(ts), 0))


def feature_names(frequency: str) -> list[str]:
    return [f"lag_{k}" for k in lags_for(frequency)] + list(covariates_for(frequency)) + ["series_id"]


def feature_scale(frequency: str, n_series: int) -> np.ndarray:
    """Fixed input scaling that maps the raw calendar/id encodings into roughly [0, 1]."""
    scale = [1.0] * len(lags_for(frequency))
    for name in covariates_for(frequency):
        scale.append(1.0 / 23.0 if name == "hour_of_day" else 1.0 / 6.0)
    scale.append(1.0 / max(n_series - 1, 1))
    return np.array(scale)


def featurize(panel: PanelSeries, t: int, i: int, scaler: SeriesScaler | None = None) -> np.ndarray:
    """Input vector for series ``i`` at time ``t``: ``[lagged values | calendar | series id]``.

    Lagged values are normalized with ``scaler`` when given. Only values at
    indices before ``t`` and the timestamp at ``t`` are used.
    """
    lags = lags_for(panel.frequency)
    if t - max(lags) < 0:
        raise InsufficientHistory(f"t={t} has no value at lag {max(lags)}")
    if not 0 <= t < panel.length:
        raise IndexError(f"time index {t} outside panel of length {panel.length}")
    vals = panel.values[[t - k for k in lags], i]
    if scaler is not None:
        vals = scaler.normalize(vals, i)
    cov = time_covariates(panel.timestamps[t:t + 1], panel.frequency)[0]
    return np.concatenate([vals, cov, [float(i)]])


@dataclass
class ForecastBatch:
    """Stacked windows: ``S`` slices of ``B`` series each.

    ``features`` covers the context and the horizon (``P + Q`` steps) with
    lags taken from observed values (teacher forcing).
    """

    features: np.ndarray  # (S, B, P+Q, F)
    context: np.ndarray  # (S, B, P) normalized
    target: np.ndarray  # (S, B, Q) normalized
    target_mask: np.ndarray  # (S, B, Q)
    series: np.ndarray  # (S, B)
    start: np.ndarray  # (S,) index of first forecast step

    @property
    def P(self) -> int:
        return self.context.shape[-1]


@dataclass
class PanelDataset:
    """A panel prepared for training: split, scaler, normalized inputs and targets."""

    panel: PanelSeries
    split: SplitSpec
    scaler: SeriesScaler
    inputs: np.ndarray  # (T, N) normalized, forward-filled
    targets: np.ndarray  # (T, N) normalized, NaN where masked
    features: np.ndarray  # (T, N, F), NaN where lags do not exist
    lags: tuple[int, ...] = field(default=())

    @classmethod
    def prepare(cls, panel: PanelSeries, split: SplitSpec) -> "PanelDataset":
        if split.total != panel.length:
            raise ValueError("split does not match panel length")
        scaler = SeriesScaler.fit(panel.values[: split.train_end])
        norm = scaler.normalize(panel.values)
        inputs = _forward_fill(norm)
        inputs[~np.isfinite(inputs)] = 0.0
        targets = norm.copy()
        targets[: split.train_end] = inputs[: split.train_end]
        lags = lags_for(panel.frequency)
        T, N = norm.shape
        cov = time_covariates(panel.timestamps, panel.frequency)
        feats = np.full((T, N, len(lags) + cov.shape[1] + 1), np.nan)
        for k, lag in enumerate(lags):
            feats[lag:, :, k] = inputs[:-lag]
        feats[:, :, len(lags):-1] = cov[:, None, :]
        feats[:, :, -1] = np.arange(N)
        return cls(panel, split, scaler, inputs, targets, feats, lags)

    @property
    def n_series(self) -> int:
        return self.panel.n_series

    @property
    def max_lag(self) -> int:
        return max(self.lags)

    @property
    def n_features(self) -> int:
        return self.features.shape[-1]

    def window(self, starts, series) -> ForecastBatch:
        """Windows forecasting from each ``starts[s]`` for the series ``series[s]``."""
        starts = np.atleast_1d(np.asarray(starts, dtype=np.int64))
        series = np.asarray(series, dtype=np.int64)
        if series.ndim == 1:
            series = np.broadcast_to(series, (len(starts), len(series)))
        P, Q = self.split.P, self.split.Q
        if np.any(starts - P - self.max_lag < 0):
            raise InsufficientHistory("window context reaches before the first available lag")
        if np.any(starts + Q > self.panel.length):
            raise InsufficientHistory("window horizon runs past the end of the panel")
        offs = np.arange(-P, Q)
        tt = starts[:, None, None] + offs[None, None, :]  # (S, 1, P+Q)
        ss = series[:, :, None]  # (S, B, 1)
        feats = self.features[tt, ss]
        ctx = self.inputs[tt[..., :P], ss]
        tgt = self.targets[tt[..., P:], ss]
        mask = np.isfinite(tgt)
        return ForecastBatch(feats, ctx, np.where(mask, tgt, 0.0), mask, series.copy(), starts)

    def seq2seq_inputs(self, batch: ForecastBatch) -> np.ndarray:
        """Flattened context plus calendar/id covariates of the first forecast step."""
        n_lags = len(self.lags)
        cov = batch.features[:, :, batch.P, n_lags:]
        return np.concatenate([batch.context, cov], axis=-1)


def sample_training_batch(data: PanelDataset, B: int, rng, n_slices: int = 1) -> ForecastBatch:
    """Random training windows: each slice holds ``min(B, N)`` distinct series and one start time.

    Windows (context, horizon and lag history) lie inside the training span.
    """
    rng = np.random.default_rng(rng)
    P, Q = data.split.P, data.split.Q
    lo = data.max_lag + P
    hi = data.split.train_end - Q
    if hi < lo:
        raise InsufficientHistory(
            f"training span {data.split.train_end} shorter than P+Q+max lag = {P + Q + data.max_lag}")
    size = min(B, data.n_series)
    series = np.stack([rng.choice(data.n_series, size=size, replace=False) for _ in range(n_slices)])
    starts = rng.integers(lo, hi + 1, size=n_slices)
    return data.window(starts, series)
