"""Command-line entry point: ``mvgcrps generate | train | evaluate | benchmark``.

Option values are resolved as: command-line flag, then the ``--config``
JSON file (flat keys named like the flags with underscores), then the
built-in defaults. Every run writes ``resolved_config.json`` with the
complete set of values used.

Exit codes: 0 success, 1 usage or configuration error, 2 training diverged,
3 input/output error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import data as ds
from .errors import Diverged, IrregularFrequency, MVGError, ParseError, SingularDesign
from .forecaster import MODEL_KINDS, ModelConfig, load_checkpoint, save_checkpoint
from .metrics import VarForecaster, evaluate_rolling, make_forecaster
from .scoring import LOSS_IDS
from .trainer import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
NA_MARKER = "N/A: did not converge"

DATA_DEFAULTS = {
    "data": None,
    "name": "synthetic",
    "series": 8,
    "length": 2000,
    "frequency": "hourly",
    "outlier_prob": 0.0,
    "kappa": 1.0,
    "clean_test": False,
    "P": None,
    "Q": None,
    "rolling_evals": None,
}
MODEL_DEFAULTS = {"model": "recurrent-ar", "hidden_size": 40, "n_layers": 2, "rank": 10, "dropout": 0.01}
TRAIN_DEFAULTS = {k: v for k, v in TrainConfig().to_dict().items() if k != "seed"}
RUN_DEFAULTS = {"loss": "mvg-crps", "eval_samples": 100, "seed": 0, "out": "out"}
BENCH_DEFAULTS = {"losses": ["log-score", "mvg-crps"], "models": ["recurrent-ar"]}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON file with option values (overridden by flags)")
    p.add_argument("--seed", type=int, help="master random seed")
    p.add_argument("--out", help="output directory")
    return p


def _data_flags(p):
    g = p.add_argument_group("dataset")
    g.add_argument("--data", help="wide CSV panel; a sibling <stem>.manifest.json supplies P/Q/rolling_evals")
    g.add_argument("--name", help="dataset name for generated panels")
    g.add_argument("--series", type=int, help="number of synthetic series")
    g.add_argument("--length", type=int, help="synthetic panel length")
    g.add_argument("--frequency", choices=tuple(ds.FIXED_STEPS))
    g.add_argument("--outlier-prob", type=float, dest="outlier_prob")
    g.add_argument("--kappa", type=float, help="innovation multiplier on contaminated steps")
    g.add_argument("--clean-test", action="store_const", const=True, dest="clean_test",
                   help="keep the test span free of contamination")
    g.add_argument("--P", type=int, help="context length (must equal Q)")
    g.add_argument("--Q", type=int, help="forecast horizon")
    g.add_argument("--rolling-evals", type=int, dest="rolling_evals")


def _model_flags(p):
    g = p.add_argument_group("model and training")
    g.add_argument("--model", choices=MODEL_KINDS)
    g.add_argument("--loss", choices=LOSS_IDS)
    g.add_argument("--hidden-size", type=int, dest="hidden_size")
    g.add_argument("--n-layers", type=int, dest="n_layers")
    g.add_argument("--rank", type=int)
    g.add_argument("--dropout", type=float)
    g.add_argument("--learning-rate", type=float, dest="learning_rate")
    g.add_argument("--l2", type=float)
    g.add_argument("--clip-norm", type=float, dest="clip_norm")
    g.add_argument("--max-updates", type=int, dest="max_updates")
    g.add_argument("--plateau-patience-updates", type=int, dest="plateau_patience_updates")
    g.add_argument("--lr-factor", type=float, dest="lr_factor")
    g.add_argument("--batch-size", type=int, dest="batch_size")
    g.add_argument("--slice-size", type=int, dest="slice_size")
    g.add_argument("--batches-per-epoch", type=int, dest="batches_per_epoch")
    g.add_argument("--early-stop-epochs", type=int, dest="early_stop_epochs")
    g.add_argument("--energy-samples", type=int, dest="energy_samples")
    g.add_argument("--eval-samples", type=int, dest="eval_samples", help="sample paths per forecast")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="mvgcrps", description="Train and evaluate Gaussian forecasters under proper scoring rules.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic panel CSV and manifest")
    _data_flags(g)

    t = sub.add_parser("train", parents=[common], help="train one model")
    _data_flags(t)
    _model_flags(t)

    e = sub.add_parser("evaluate", parents=[common], help="rolling evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    _data_flags(e)
    e.add_argument("--eval-samples", type=int, dest="eval_samples")

    b = sub.add_parser("benchmark", parents=[common], help="train and compare losses and models, plus VAR(1)")
    _data_flags(b)
    _model_flags(b)
    b.add_argument("--losses", nargs="+", choices=LOSS_IDS)
    b.add_argument("--models", nargs="+", choices=MODEL_KINDS)
    return parser


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge flags over the config file over ``defaults``; unknown config keys are an error."""
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
        unknown = sorted(set(cfg) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else cfg.get(key, default)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# dataset resolution


def _synthetic(opts: dict) -> ds.PanelSeries:
    if not 0.0 <= opts["outlier_prob"] < 1.0:
        raise UsageError("--outlier-prob must lie in [0, 1)")
    if opts["kappa"] < 1.0:
        raise UsageError("--kappa must be at least 1")
    if opts["series"] < 1 or opts["length"] < 2:
        raise UsageError("--series must be positive and --length at least 2")
    clean_after = None
    if opts["clean_test"]:
        P, Q, rolling = _windows(opts, opts["frequency"])
        clean_after = opts["length"] - (Q + rolling - 1)
    spec = ds.ContaminationSpec(opts["outlier_prob"], opts["kappa"], clean_after=clean_after)
    return ds.generate_synthetic(opts["series"], opts["length"], spec, seed=opts["seed"],
                                 frequency=opts["frequency"])


def _windows(opts: dict, frequency: str, manifest: dict | None = None):
    manifest = manifest or {}
    P0, R0 = ds.DEFAULT_WINDOWS[frequency]
    P = opts["P"] if opts["P"] is not None else manifest.get("P", P0)
    Q = opts["Q"] if opts["Q"] is not None else manifest.get("Q", P)
    rolling = opts["rolling_evals"] if opts["rolling_evals"] is not None else manifest.get("rolling_evals", R0)
    if P != Q:
        raise UsageError("context length P must equal horizon Q")
    return int(P), int(Q), int(rolling)


def manifest_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".manifest.json")


def load_dataset(opts: dict) -> ds.PanelDataset:
    manifest = None
    if opts["data"]:
        panel = ds.load_csv(opts["data"])
        mpath = manifest_path(opts["data"])
        if mpath.exists():
            manifest = ds.read_manifest(mpath)
    else:
        panel = _synthetic(opts)
    P, Q, rolling = _windows(opts, panel.frequency, manifest)
    try:
        split = ds.SplitSpec.make(panel.length, P, Q, rolling)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return ds.PanelDataset.prepare(panel, split)


def _model_config(opts: dict, data: ds.PanelDataset, kind: str) -> ModelConfig:
    return ModelConfig.for_dataset(data, kind=kind, hidden_size=opts["hidden_size"], n_layers=opts["n_layers"],
                                   rank=opts["rank"], dropout=opts["dropout"])


def _train_config(opts: dict) -> TrainConfig:
    return TrainConfig(seed=opts["seed"], **{k: opts[k] for k in TRAIN_DEFAULTS})


# --------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    opts = resolve(args, {**DATA_DEFAULTS, "seed": 0, "out": "out"})
    panel = _synthetic(opts)
    P, Q, rolling = _windows(opts, panel.frequency)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{opts['name']}.csv"
    ds.write_csv(panel, csv_path)
    ds.write_manifest(manifest_path(csv_path), opts["name"], panel.frequency, P, Q, rolling)
    _write_json(out / "resolved_config.json", opts)
    print(f"wrote {csv_path} ({panel.length} x {panel.n_series})")
    return EXIT_OK


def _train_one(opts, data, kind, loss, out: Path, log=print):
    """Train, save checkpoint and history; returns (model, history, seconds per epoch)."""
    mcfg = _model_config(opts, data, kind)
    model, history = train(mcfg, _train_config(opts), data, loss, log=log)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint.bin", extra={"loss": loss, "seed": opts["seed"]})
    history.to_csv(out / "history.csv")
    history.to_json(out / "history.json")
    return model, history


def _dataset_info(data: ds.PanelDataset) -> dict:
    s = data.split
    return {"frequency": data.panel.frequency, "length": data.panel.length, "n_series": data.n_series,
            "P": s.P, "Q": s.Q, "rolling_evals": s.rolling_evals, "train_end": s.train_end,
            "valid_end": s.valid_end}


def _run_opts(opts: dict) -> dict:
    # everything that determines results; excludes where files go
    return {k: v for k, v in opts.items() if k != "out"}


def cmd_train(args) -> int:
    opts = resolve(args, {**DATA_DEFAULTS, **MODEL_DEFAULTS, **TRAIN_DEFAULTS, **RUN_DEFAULTS})
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", opts)
    data = load_dataset(opts)
    try:
        model, history = _train_one(opts, data, opts["model"], opts["loss"], out)
    except Diverged as exc:
        _write_json(out / "summary.json", {"config": _run_opts(opts), "status": NA_MARKER})
        print(f"{NA_MARKER} ({exc})", file=sys.stderr)
        return EXIT_DIVERGED
    report = evaluate_rolling(make_forecaster(model, data), data, opts["eval_samples"], opts["seed"],
                              name=f"{opts['model']}/{opts['loss']}")
    _write_json(out / "summary.json", {"config": _run_opts(opts), "dataset": _dataset_info(data),
                                       "status": "ok", "history": history.summary(),
                                       "evaluation": report.to_dict()})
    _write_json(out / "timing.json", {"seconds_per_epoch": history.seconds_per_epoch(),
                                      "epoch_seconds": history.seconds})
    print(f"CRPS_sum {report.crps_sum:.6g}  energy {report.energy_score:.6g}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    opts = resolve(args, {**DATA_DEFAULTS, "checkpoint": None, "eval_samples": 100, "seed": 0, "out": "out"})
    opts["checkpoint"] = args.checkpoint
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", opts)
    model, _ = load_checkpoint(opts["checkpoint"])
    data = load_dataset(opts)
    if model.config.input_size != ModelConfig.for_dataset(data, kind=model.config.kind).input_size:
        raise UsageError("checkpoint does not match the dataset's features")
    report = evaluate_rolling(make_forecaster(model, data), data, opts["eval_samples"], opts["seed"],
                              name=model.config.kind, fan_path=out / "quantiles.csv",
                              heatmap_path=out / "covariance_heatmap.csv")
    report.to_json(out / "evaluation.json")
    print(f"CRPS_sum {report.crps_sum:.6g}  energy {report.energy_score:.6g}")
    return EXIT_OK


REPORT_COLUMNS = ("model", "loss", "status", "crps_sum", "crps_sum_pooled", "energy_score", "median_max_eig",
                  "mean_trace", "max_offdiag", "seconds_per_epoch", "epochs", "updates")


def cmd_benchmark(args) -> int:
    opts = resolve(args, {**DATA_DEFAULTS, **MODEL_DEFAULTS, **TRAIN_DEFAULTS, **RUN_DEFAULTS, **BENCH_DEFAULTS})
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", opts)
    data = load_dataset(opts)
    rows, timing = [], {}

    def record(model_name, loss, status, report=None, history=None, seconds=None):
        row = {"model": model_name, "loss": loss, "status": status}
        if report is not None:
            row.update(crps_sum=report.crps_sum, crps_sum_pooled=report.crps_sum_pooled,
                       energy_score=report.energy_score, median_max_eig=report.median_max_eig,
                       mean_trace=float(np.mean(report.trace)), max_offdiag=float(np.max(report.max_offdiag)))
        if history is not None:
            row.update(epochs=len(history), updates=history.updates[-1] if len(history) else 0)
        rows.append((row, report, seconds))

    for kind in opts["models"]:
        for loss in opts["losses"]:
            cell = out / f"{kind}__{loss}"
            print(f"== {kind} / {loss}")
            try:
                model, history = _train_one(opts, data, kind, loss, cell, log=None)
            except Diverged:
                record(kind, loss, NA_MARKER)
                continue
            report = evaluate_rolling(make_forecaster(model, data), data, opts["eval_samples"], opts["seed"],
                                      name=f"{kind}/{loss}", fan_path=cell / "quantiles.csv",
                                      heatmap_path=cell / "covariance_heatmap.csv")
            report.to_json(cell / "evaluation.json")
            timing[f"{kind}/{loss}"] = history.seconds_per_epoch()
            record(kind, loss, "ok", report, history, history.seconds_per_epoch())

    try:
        fc = VarForecaster(data)
    except (SingularDesign, ValueError) as exc:
        record("var1", "-", f"N/A: {exc}")
    else:
        cell = out / "var1"
        cell.mkdir(parents=True, exist_ok=True)
        report = evaluate_rolling(fc, data, opts["eval_samples"], opts["seed"], name="var1",
                                  fan_path=cell / "quantiles.csv", heatmap_path=cell / "covariance_heatmap.csv")
        record("var1", "-", "ok", report)

    summary = {"config": _run_opts(opts), "dataset": _dataset_info(data),
               "rows": [r for r, _, _ in rows],
               "evaluations": {f"{r['model']}/{r['loss']}": rep.to_dict() for r, rep, _ in rows if rep is not None}}
    _write_json(out / "summary.json", summary)
    _write_json(out / "timing.json", timing)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row, _, seconds in rows:
            full = {**row, "seconds_per_epoch": seconds}
            w.writerow(["" if full.get(c) is None else full[c] for c in REPORT_COLUMNS])
    for row, _, seconds in rows:
        score = f"{row['crps_sum']:.5g}" if "crps_sum" in row else row["status"]
        print(f"{row['model']:>14} {row['loss']:>13}  CRPS_sum {score}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "benchmark": cmd_benchmark}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mvgcrps: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ParseError, IrregularFrequency) as exc:
        print(f"mvgcrps: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, MVGError) as exc:
        print(f"mvgcrps: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
