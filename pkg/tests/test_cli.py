import csv
import json

import pytest

from mvgcrps.cli import NA_MARKER, main

TINY = ["--series", "3", "--length", "400", "--frequency", "daily", "--P", "7", "--Q", "7", "--rolling-evals", "2"]
FAST = ["--hidden-size", "4", "--rank", "2", "--max-updates", "6", "--batches-per-epoch", "3", "--batch-size", "2",
        "--slice-size", "3", "--energy-samples", "10", "--eval-samples", "10"]


def read_json(path):
    return json.loads(path.read_text())


def test_generate_is_byte_identical(tmp_path):
    args = ["generate", "--series", "8", "--length", "2000", "--outlier-prob", "0.05", "--kappa", "10",
            "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("synthetic.csv", "synthetic.manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = read_json(tmp_path / "a" / "synthetic.manifest.json")
    assert manifest == {"name": "synthetic", "frequency": "hourly", "P": 24, "Q": 24, "rolling_evals": 7}
    resolved = read_json(tmp_path / "a" / "resolved_config.json")
    assert resolved["outlier_prob"] == 0.05 and resolved["seed"] == 7 and resolved["clean_test"] is False


def test_usage_errors(tmp_path, capsys):
    assert main(["generate", "--outlier-prob", "1.5", "--out", str(tmp_path)]) == 1
    with pytest.raises(SystemExit) as info:
        main(["train", "--loss", "pinball"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 1
    assert main(["generate", "--P", "24", "--Q", "12", "--out", str(tmp_path)]) == 1
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"series": 3, "colour": "red"}))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "colour" in capsys.readouterr().err


def test_io_errors(tmp_path):
    assert main(["train", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "o")]) == 3
    bad = tmp_path / "bad.csv"
    bad.write_text("timestamp,a\n2020-01-01,1\n2020-01-02,x\n")
    assert main(["evaluate", "--data", str(bad), "--checkpoint", str(tmp_path / "none.bin"),
                 "--out", str(tmp_path / "o")]) == 3


def test_config_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"series": 5, "kappa": 4.0, "name": "fromcfg"}))
    assert main(["generate", "--config", str(cfg), "--series", "2", "--length", "300", "--out", str(tmp_path)]) == 0
    resolved = read_json(tmp_path / "resolved_config.json")
    assert resolved["series"] == 2  # flag beats config
    assert resolved["kappa"] == 4.0 and resolved["name"] == "fromcfg"  # config beats default
    assert resolved["frequency"] == "hourly"  # default
    with open(tmp_path / "fromcfg.csv") as fh:
        assert next(csv.reader(fh)) == ["timestamp", "s0", "s1"]


def test_train_artifacts_and_rerun(tmp_path):
    args = ["train", "--loss", "mvg-crps", "--model", "recurrent-ar", *TINY, *FAST, "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = tmp_path / "a"
    for name in ("checkpoint.bin", "history.csv", "history.json", "summary.json", "timing.json",
                 "resolved_config.json"):
        assert (a / name).exists(), name
    assert (a / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()
    summary = read_json(a / "summary.json")
    assert summary["status"] == "ok" and summary["config"]["loss"] == "mvg-crps"
    assert len(summary["evaluation"]["starts"]) == 2
    resolved = read_json(a / "resolved_config.json")
    assert resolved["learning_rate"] == 1e-3 and resolved["out"] == str(a)


def test_train_divergence_exit_code(tmp_path):
    args = ["train", *TINY, *FAST, "--learning-rate", "1e300", "--max-updates", "200", "--batches-per-epoch",
            "100", "--out", str(tmp_path)]
    with pytest.warns(RuntimeWarning):
        assert main(args) == 2
    assert read_json(tmp_path / "summary.json")["status"] == NA_MARKER


def test_evaluate_from_csv(tmp_path):
    assert main(["generate", *TINY, "--out", str(tmp_path / "g")]) == 0
    data = str(tmp_path / "g" / "synthetic.csv")
    assert main(["train", "--data", data, "--model", "mlp-seq2seq", *FAST, "--out", str(tmp_path / "t")]) == 0
    assert main(["evaluate", "--data", data, "--checkpoint", str(tmp_path / "t" / "checkpoint.bin"),
                 "--eval-samples", "10", "--out", str(tmp_path / "e")]) == 0
    report = read_json(tmp_path / "e" / "evaluation.json")
    assert len(report["crps_sum_per_window"]) == 2 and report["num_samples"] == 10
    assert (tmp_path / "e" / "quantiles.csv").exists() and (tmp_path / "e" / "covariance_heatmap.csv").exists()
    # a checkpoint from a dataset with other features is refused
    assert main(["evaluate", "--checkpoint", str(tmp_path / "t" / "checkpoint.bin"), "--series", "3",
                 "--length", "2000", "--out", str(tmp_path / "e2")]) == 1


def test_benchmark_rows_and_determinism(tmp_path):
    args = ["benchmark", *TINY, *FAST, "--losses", "log-score", "mvg-crps", "--models", "recurrent-ar"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()
    with open(tmp_path / "a" / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["model"], r["loss"]) for r in rows] == [("recurrent-ar", "log-score"), ("recurrent-ar", "mvg-crps"),
                                                       ("var1", "-")]
    assert all(r["status"] == "ok" and float(r["crps_sum"]) > 0 for r in rows)
    assert float(rows[0]["seconds_per_epoch"]) > 0 and rows[2]["seconds_per_epoch"] == ""
    timing = read_json(tmp_path / "a" / "timing.json")
    assert set(timing) == {"recurrent-ar/log-score", "recurrent-ar/mvg-crps"}


def test_benchmark_records_failures(tmp_path):
    args = ["benchmark", "--series", "1", "--length", "400", "--frequency", "daily", "--P", "7", "--Q", "7",
            "--rolling-evals", "2", *FAST, "--losses", "mvg-crps", "--out", str(tmp_path)]
    assert main(args) == 0
    rows = read_json(tmp_path / "summary.json")["rows"]
    assert rows[0]["status"] == "ok" and rows[1]["model"] == "var1" and rows[1]["status"].startswith("N/A")
