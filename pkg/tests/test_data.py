import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvgcrps.data import (ContaminationSpec, PanelDataset, PanelSeries, SeriesScaler, SplitSpec, featurize,
                          feature_names, generate_synthetic, infer_frequency, load_csv, read_manifest,
                          sample_training_batch, time_covariates, write_csv, write_manifest)
from mvgcrps.errors import InsufficientHistory, IrregularFrequency, ParseError


def write(tmp_path, text, name="panel.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def hourly_panel(n, length, seed=0, start="2021-03-01T00:00:00"):
    rng = np.random.default_rng(seed)
    ts = np.datetime64(start, "s") + np.arange(length) * np.timedelta64(3600, "s")
    return PanelSeries(rng.normal(size=(length, n)), ts, "hourly", [f"s{i}" for i in range(n)])


# --- CSV ------------------------------------------------------------------------


def test_load_small_file(tmp_path):
    path = write(tmp_path, "timestamp,a,b\n2020-01-01T00:00,1,2\n2020-01-01T01:00,3,\n2020-01-01T02:00,5,6\n")
    panel = load_csv(path)
    assert panel.values.shape == (3, 2)
    assert panel.series_ids == ["a", "b"]
    assert panel.frequency == "hourly"
    assert not panel.mask[1, 1] and np.isnan(panel.values[1, 1])


def test_parse_error_names_row_and_column(tmp_path):
    path = write(tmp_path, "timestamp,seriesA,seriesB\n2020-01-01T00:00,1,2\n2020-01-01T01:00,oops,2\n")
    with pytest.raises(ParseError) as info:
        load_csv(path)
    assert info.value.row == 2 and info.value.column == "seriesA"
    assert "row 2" in str(info.value) and "seriesA" in str(info.value)


def test_parse_errors_other(tmp_path):
    with pytest.raises(ParseError):
        load_csv(write(tmp_path, ""))
    with pytest.raises(ParseError):
        load_csv(write(tmp_path, "timestamp,a\n2020-01-01T00:00,1,2\n"))
    with pytest.raises(ParseError):
        load_csv(write(tmp_path, "timestamp,a\nyesterday,1\n"))


def test_single_gap_is_reinserted(tmp_path):
    panel = hourly_panel(2, 1001)
    keep = np.ones(1001, dtype=bool)
    keep[500] = False  # one 2-hour delta among 999
    path = tmp_path / "gap.csv"
    write_csv(PanelSeries(panel.values[keep], panel.timestamps[keep], "hourly", panel.series_ids), path)
    loaded = load_csv(path)
    assert loaded.length == 1001
    assert not loaded.mask[500].any() and loaded.mask[[499, 501]].all()
    np.testing.assert_array_equal(loaded.timestamps, panel.timestamps)


def test_irregular_timestamps_rejected(tmp_path):
    rng = np.random.default_rng(0)
    steps = np.where(rng.random(300) < 0.05, 5400, 3600)  # ~5% off-grid deltas
    ts = np.datetime64("2020-01-01T00:00", "s") + np.concatenate([[0], np.cumsum(steps)]).astype("timedelta64[s]")
    lines = ["timestamp,a"] + [f"{t},1.0" for t in ts]
    with pytest.raises(IrregularFrequency):
        load_csv(write(tmp_path, "\n".join(lines) + "\n"))


def test_csv_round_trip(tmp_path):
    panel = hourly_panel(3, 50, seed=1)
    panel.values[4, 1] = np.nan
    path = tmp_path / "rt.csv"
    write_csv(panel, path)
    back = load_csv(path)
    np.testing.assert_array_equal(back.values, panel.values)
    np.testing.assert_array_equal(back.timestamps, panel.timestamps)


def test_manifest_round_trip(tmp_path):
    path = tmp_path / "m.json"
    write_manifest(path, "toy", "hourly", 24, 24, 7)
    assert read_manifest(path) == {"name": "toy", "frequency": "hourly", "P": 24, "Q": 24, "rolling_evals": 7}


@pytest.mark.parametrize("step, name", [(1800, "half-hourly"), (3600, "hourly"), (86400, "daily"),
                                        (7 * 86400, "weekly")])
def test_infer_fixed_frequencies(step, name):
    ts = np.datetime64("2020-01-01", "s") + np.arange(5) * np.timedelta64(step, "s")
    assert infer_frequency(ts) == name


def test_monthly_panel_loads(tmp_path):
    rows = [f"2020-{m:02d}-01,{m}" for m in range(1, 13)]
    panel = load_csv(write(tmp_path, "timestamp,a\n" + "\n".join(rows) + "\n"))
    assert panel.frequency == "monthly" and panel.length == 12


# --- synthetic --------------------------------------------------------------------


def test_synthetic_clean_and_reproducible():
    a = generate_synthetic(4, 300, ContaminationSpec(), seed=3)
    b = generate_synthetic(4, 300, ContaminationSpec(), seed=3)
    assert not a.contaminated.any()
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, generate_synthetic(4, 300, seed=4).values)


def test_synthetic_contamination_count():
    panel = generate_synthetic(2, 10_000, ContaminationSpec(0.05, 10.0), seed=1)
    sd = np.sqrt(10_000 * 0.05 * 0.95)
    assert abs(panel.contaminated.sum() - 500) < 3 * sd


def test_contamination_inflates_innovations_and_respects_clean_after():
    spec = ContaminationSpec(0.1, 10.0, seed=5, clean_after=1500)
    dirty = generate_synthetic(3, 2000, spec, seed=2)
    clean = generate_synthetic(3, 2000, ContaminationSpec(), seed=2)
    assert not dirty.contaminated[1500:].any()
    jump = np.abs(np.diff(dirty.values - clean.values, axis=0)).max(axis=1)
    assert jump[dirty.contaminated[1:]].mean() > 5 * jump[~dirty.contaminated[1:]].mean()


def test_contamination_spec_validation():
    with pytest.raises(ValueError):
        ContaminationSpec(1.0, 2.0)
    with pytest.raises(ValueError):
        ContaminationSpec(0.1, 0.5)


# --- splits, scaling, features ---------------------------------------------------


def test_split_layout():
    sp = SplitSpec.make(1000, 24, 24, 7)
    assert sp.test_span == 30 and sp.valid_end - sp.train_end == 30
    assert sp.test_starts()[0] == sp.valid_end and sp.test_starts()[-1] + 24 == 1000
    assert sp.valid_starts()[-1] + 24 == sp.valid_end
    one = SplitSpec.make(1000, 24, 24, 1)
    np.testing.assert_array_equal(one.test_starts(), [one.valid_end])
    with pytest.raises(ValueError):
        SplitSpec.make(1000, 24, 12, 7)
    with pytest.raises(InsufficientHistory):
        SplitSpec.make(80, 24, 24, 7)


def test_scaler_round_trip_and_floor():
    x = np.column_stack([np.arange(10.0), np.full(10, 3.0)])
    s = SeriesScaler.fit(x)
    assert s.std[1] == 1e-6
    np.testing.assert_allclose(s.std[0], np.std(np.arange(10.0)))
    np.testing.assert_allclose(s.denormalize(s.normalize(x)), x, atol=1e-10)


def test_scaler_uses_training_span_only():
    panel = hourly_panel(3, 600, seed=2)
    sp = SplitSpec.make(600, 24, 24, 7)
    full = PanelDataset.prepare(panel, sp).scaler
    cut = SeriesScaler.fit(panel.values[: sp.train_end])
    np.testing.assert_array_equal(full.mean, cut.mean)
    np.testing.assert_array_equal(full.std, cut.std)


def test_featurize_calendar_example():
    ts = np.datetime64("2020-01-06T00:00", "s") + np.arange(200) * np.timedelta64(3600, "s")  # a Monday
    panel = PanelSeries(np.arange(400.0).reshape(200, 2), ts, "hourly", ["a", "b"])
    t = 168 + 13
    x = featurize(panel, t, 1)
    assert str(ts[t]) == "2020-01-13T13:00:00"
    np.testing.assert_array_equal(x[3:5], [13, 0])
    np.testing.assert_array_equal(x[:3], panel.values[[t - 1, t - 24, t - 168], 1])
    assert x[-1] == 1.0
    assert feature_names("hourly") == ["lag_1", "lag_24", "lag_168", "hour_of_day", "day_of_week", "series_id"]
    with pytest.raises(InsufficientHistory):
        featurize(panel, 167, 0)


def test_featurize_daily_lags():
    ts = np.datetime64("2020-01-01", "s") + np.arange(30) * np.timedelta64(86400, "s")
    panel = PanelSeries(np.arange(30.0)[:, None], ts, "daily", ["a"])
    x = featurize(panel, 20, 0)
    np.testing.assert_array_equal(x[:3], [19, 13, 6])
    assert feature_names("daily")[:3] == ["lag_1", "lag_7", "lag_14"]
    assert time_covariates(ts[:1], "weekly").shape == (1, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(168, 299), st.integers(0, 2**32 - 1))
def test_featurize_is_causal(t, seed):
    panel = hourly_panel(2, 300, seed=0)
    before = featurize(panel, t, 0)
    noisy = panel.values.copy()
    noisy[t:] = np.random.default_rng(seed).normal(size=noisy[t:].shape)
    after = featurize(PanelSeries(noisy, panel.timestamps, "hourly", panel.series_ids), t, 0)
    np.testing.assert_array_equal(before, after)


def test_dataset_windows_and_masking():
    panel = hourly_panel(4, 700, seed=3)
    sp = SplitSpec.make(700, 24, 24, 7)
    panel.values[sp.valid_end + 3, 2] = np.nan  # in the test span: masked
    panel.values[300, 1] = np.nan  # in the training span: forward-filled
    data = PanelDataset.prepare(panel, sp)
    assert data.targets[300, 1] == data.targets[299, 1]
    batch = data.window(sp.test_starts()[:1], np.arange(4))
    assert batch.features.shape == (1, 4, 48, 6)
    assert not batch.target_mask[0, 2, 3] and batch.target_mask.sum() == 4 * 24 - 1
    # context ends right before the first forecast step
    np.testing.assert_array_equal(batch.context[0, :, -1], data.inputs[sp.valid_end - 1])
    np.testing.assert_array_equal(batch.features[0, :, 24, 0], data.inputs[sp.valid_end - 1])
    with pytest.raises(InsufficientHistory):
        data.window([100], np.arange(2))


def test_training_batches():
    panel = hourly_panel(5, 700, seed=4)
    data = PanelDataset.prepare(panel, SplitSpec.make(700, 24, 24, 7))
    b = sample_training_batch(data, 20, 0)
    assert b.series.shape == (1, 5) and sorted(b.series[0]) == list(range(5))
    c = sample_training_batch(data, 20, 0)
    np.testing.assert_array_equal(b.features, c.features)
    many = sample_training_batch(data, 3, 1, n_slices=200)
    assert np.all(many.start >= data.max_lag + 24)
    assert np.all(many.start + 24 <= data.split.train_end)
    assert np.isfinite(many.features).all()
    assert all(len(set(s)) == 3 for s in many.series.tolist())


def test_training_batch_series_frequencies():
    panel = hourly_panel(40, 600, seed=5)
    data = PanelDataset.prepare(panel, SplitSpec.make(600, 24, 24, 7))
    rng = np.random.default_rng(6)
    counts = np.zeros(40)
    for _ in range(10):
        b = sample_training_batch(data, 20, rng, n_slices=1000)
        counts += np.bincount(b.series.ravel(), minlength=40)
    # each series appears in a slice with probability 1/2
    assert np.all(np.abs(counts - 5000) < 3 * 50)


def test_training_span_too_short():
    panel = hourly_panel(2, 260, seed=6)
    data = PanelDataset.prepare(panel, SplitSpec.make(260, 24, 24, 7))
    with pytest.raises(InsufficientHistory):
        sample_training_batch(data, 20, 0)
