"""Batch front door: generate, preprocess, train, evaluate, experiment, report.

Config files are JSON; command-line flags override file values. Every output
is a pure function of (config, master seed): no timestamps, sorted JSON keys,
repr-formatted floats, so repeated invocations are byte-identical.

Exit codes: 0 success, 1 usage/config, 2 data/format, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, data, metrics, plots
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DklShiftError,
    FormatError,
    NumericError,
    StateError,
    UndefinedMetricError,
)
from .metrics import PredictionSet
from .model import load_checkpoint, save_checkpoint
from .presets import MODES, PRESET_NAMES, ExperimentConfig, preset
from .train import TrainConfig, aggregate_csv, aggregate_rows, run_experiment, train_model

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FORMAT = 2
EXIT_NUMERIC = 3

BUNDLE_SCHEMA = "dklshift-bundle-v1"
HEADLINE_KINDS = ("bilstm", "dkl")


# ---------------------------------------------------------------------------
# config plumbing


def _load_json(path: Path, exc: type) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise exc(f"cannot read {path}: {e}") from e
    try:
        loaded = json.loads(text)
    except json.JSONDecodeError as e:
        raise exc(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(loaded, dict):
        raise exc(f"{path}: top-level JSON value must be an object")
    return loaded


def _deep_update(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_update(out[key], value)
        else:
            out[key] = value
    return out


def _experiment_config(args) -> ExperimentConfig:
    """Preset -> config file -> flags, later layers overriding earlier ones."""
    file_dict: dict = {}
    base_name = None
    if getattr(args, "config", None):
        if args.config in PRESET_NAMES:
            base_name = args.config
        else:
            file_dict = _load_json(Path(args.config), ConfigError)
    if base_name is None:
        base_name = getattr(args, "mode", None) or file_dict.get("mode") or "temporal-shift"
        if base_name not in PRESET_NAMES:
            raise ConfigError(f"unknown mode {base_name!r}; expected one of {MODES}")
    merged = _deep_update(preset(base_name).to_dict(), file_dict)
    if getattr(args, "mode", None):
        merged["mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        merged["master_seed"] = args.seed
    if getattr(args, "runs", None) is not None:
        merged["n_runs"] = args.runs
    if getattr(args, "model", None):
        merged["model_kinds"] = [args.model]
    try:
        return ExperimentConfig.from_dict(merged)
    except TypeError as e:
        raise ConfigError(f"bad experiment config: {e}") from e


def _train_config(args) -> TrainConfig:
    merged = TrainConfig().to_dict()
    if getattr(args, "config", None):
        merged = _deep_update(merged, _load_json(Path(args.config), ConfigError))
    if getattr(args, "model", None):
        merged["model_kind"] = args.model
    if getattr(args, "seed", None) is not None:
        merged["seed"] = args.seed
    try:
        return TrainConfig.from_dict(merged)
    except TypeError as e:
        raise ConfigError(f"bad train config: {e}") from e


# ---------------------------------------------------------------------------
# output plumbing


def _claim_dir(path: Path, force: bool) -> Path:
    if path.exists():
        if not force:
            raise ConfigError(f"output directory {path} exists; pass --force to overwrite")
        if not path.is_dir():
            raise ConfigError(f"output path {path} exists and is not a directory")
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _claim_file(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise ConfigError(f"output file {path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _json_text(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _split_cohort(cohort: list, mode: str, seed: int):
    if mode == "temporal-shift":
        return data.split_temporal(cohort, seed)
    return data.split_internal(cohort, seed)


def _load_processed_dir(directory: Path):
    paths = [directory / name for name in ("train.bin", "val.bin", "test.bin")]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FormatError(f"processed directory {directory} is missing {missing}")
    return tuple(data.read_processed(p) for p in paths)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    config = _experiment_config(args)
    out = _claim_dir(Path(args.out), args.force)
    episodes = data.generate_cohort(config.shift, config.master_seed)
    data.write_cohort(out, episodes, config=config.shift, seed=config.master_seed)
    print(f"wrote {len(episodes)} episodes to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    config = _experiment_config(args)
    cohort = data.read_cohort(Path(args.cohort))
    train_raw, val_raw, test_raw = _split_cohort(cohort, config.mode, config.master_seed)
    train_set, val_set, test_set, stats = data.preprocess(train_raw, val_raw, test_raw)
    out = _claim_dir(Path(args.out), args.force)
    data.write_processed(out / "train.bin", train_set)
    data.write_processed(out / "val.bin", val_set)
    data.write_processed(out / "test.bin", test_set)
    _write(out / "stats.json", _json_text({"schema": data.PROCESSED_SCHEMA, **stats.to_dict()}))
    print(f"split {config.mode}: train={train_set.n} val={val_set.n} test={test_set.n} -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _train_config(args)
    train_set, val_set, _ = _load_processed_dir(Path(args.data))
    result = train_model(config, train_set, val_set)
    out = _claim_file(Path(args.out), args.force)
    save_checkpoint(out, result.model)
    _write(out.with_suffix(".json"), _json_text(result.to_record(config)))
    print(f"{config.model_kind} seed={config.seed}: best epoch {result.best_epoch}, val auc {result.best_val_auc:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_checkpoint(Path(args.checkpoint))
    dataset = data.read_processed(Path(args.data))
    probs = model.predict_proba(dataset.episodes)
    report = metrics.compute_report(PredictionSet(probs, dataset.labels, label=Path(args.data).stem))
    text = _json_text(report.to_dict())
    if args.out:
        _write(_claim_file(Path(args.out), args.force), text)
    print(text, end="")
    return EXIT_OK


def _curve_csvs(experiment, test_set, kinds) -> tuple[str, str]:
    """ROC and reliability tables for the best-validation run per headline kind."""
    roc_lines = ["model,fpr,tpr"]
    rel_lines = ["model,bin_lo,bin_hi,count,mean_predicted,observed_frequency"]
    for kind in kinds:
        best = experiment.best_run(kind)
        probs = best.model.predict_proba(test_set.episodes)
        preds = PredictionSet(probs, test_set.labels, label="test")
        for fpr, tpr in metrics.roc_curve_points(preds):
            roc_lines.append(f"{kind},{fpr!r},{tpr!r}")
        for b in best.test_report.reliability:
            mean_p = "" if b.empty else repr(b.mean_predicted)
            freq = "" if b.empty else repr(b.observed_frequency)
            rel_lines.append(f"{kind},{b.lo!r},{b.hi!r},{b.count},{mean_p},{freq}")
    return "\n".join(roc_lines) + "\n", "\n".join(rel_lines) + "\n"


def _summary(config: ExperimentConfig, experiment, rows: list) -> dict:
    models = {}
    for row in rows:
        kind = row["model_kind"]
        entry = dict(row)
        runs = experiment.completed(kind)
        if runs:
            best = experiment.best_run(kind)
            entry["best_run"] = {
                "seed": best.seed,
                "best_val_auc": best.best_val_auc,
                "test_cox": best.test_report.cox.to_dict(),
            }
        models[kind] = entry
    return {
        "schema": BUNDLE_SCHEMA,
        "mode": config.mode,
        "master_seed": config.master_seed,
        "n_runs": config.n_runs,
        "models": models,
        "failures": experiment.failures,
    }


def cmd_experiment(args) -> int:
    config = _experiment_config(args)
    out = _claim_dir(Path(args.out), args.force)
    jobs = args.jobs if args.jobs else len(os.sched_getaffinity(0))

    cohort = data.generate_cohort(config.shift, config.master_seed)
    train_raw, val_raw, test_raw = _split_cohort(cohort, config.mode, config.master_seed)
    train_set, val_set, test_set, _ = data.preprocess(train_raw, val_raw, test_raw)
    experiment = run_experiment(
        config.train,
        train_set,
        val_set,
        test_set,
        model_kinds=config.model_kinds,
        n_runs=config.n_runs,
        base_seed=config.master_seed,
        jobs=jobs,
    )

    _write(out / "experiment.json", _json_text({"schema": BUNDLE_SCHEMA, "version": __version__, "config": config.to_dict()}))
    rows = aggregate_rows(experiment, config.model_kinds)
    _write(out / "aggregate.csv", aggregate_csv(rows))
    for kind in config.model_kinds:
        for result in experiment.completed(kind):
            run_config = replace(config.train, model_kind=kind, seed=result.seed)
            _write(out / "runs" / f"{kind}-seed{result.seed}.json", _json_text(result.to_record(run_config)))
        if experiment.completed(kind):
            (out / "checkpoints").mkdir(exist_ok=True)
            save_checkpoint(out / "checkpoints" / f"{kind}-best.ckpt", experiment.best_run(kind).model)
    headline = [k for k in HEADLINE_KINDS if k in config.model_kinds and experiment.completed(k)]
    if headline:
        roc_csv, rel_csv = _curve_csvs(experiment, test_set, headline)
        _write(out / "curves" / "roc-test.csv", roc_csv)
        _write(out / "curves" / "reliability-test.csv", rel_csv)
        _write(out / "plots" / "roc-test.svg", plots.roc_svg(roc_csv))
        _write(out / "plots" / "reliability-test.svg", plots.reliability_svg(rel_csv))
    _write(out / "summary.json", _json_text(_summary(config, experiment, rows)))

    print(aggregate_csv(rows), end="")
    for failure in experiment.failures:
        print(f"run failed: {failure['model_kind']} seed={failure['seed']}: {failure['error']}", file=sys.stderr)
    print(f"bundle written to {out}")
    return EXIT_NUMERIC if experiment.failures else EXIT_OK


_RECORD_METRICS = (
    ("val_auc_roc", ("val", "auc_roc")),
    ("val_auc_pr", ("val", "auc_pr")),
    ("test_auc_roc", ("test", "auc_roc")),
    ("test_auc_pr", ("test", "auc_pr")),
    ("test_brier", ("test", "brier")),
    ("test_unsharpness", ("test", "unsharpness")),
    ("test_cox_intercept", ("test", "cox", "intercept")),
    ("test_cox_slope", ("test", "cox", "slope")),
)


def _rows_from_records(records: list, failures: list, model_kinds) -> list:
    """Recompute the aggregate table from per-run records alone."""
    rows = []
    for kind in model_kinds:
        recs = [r for r in records if r["model_kind"] == kind]
        n_failed = sum(1 for f in failures if f["model_kind"] == kind)
        row = {"model_kind": kind, "n_runs": len(recs), "n_failures": n_failed, "single_run": len(recs) == 1}
        for name, path in _RECORD_METRICS:
            values = []
            for rec in recs:
                node = rec
                for key in path:
                    node = node[key]
                values.append(node)
            if not values:
                row[f"{name}_mean"] = float("nan")
                row[f"{name}_std"] = float("nan")
            else:
                row[f"{name}_mean"] = float(np.mean(values))
                row[f"{name}_std"] = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        rows.append(row)
    return rows


def cmd_report(args) -> int:
    bundle = Path(args.bundle)
    manifest = _load_json(bundle / "experiment.json", FormatError)
    if manifest.get("schema") != BUNDLE_SCHEMA:
        raise FormatError(f"{bundle}/experiment.json: schema {manifest.get('schema')!r} != {BUNDLE_SCHEMA!r}")
    summary = _load_json(bundle / "summary.json", FormatError)
    model_kinds = manifest["config"]["model_kinds"]
    records = []
    runs_dir = bundle / "runs"
    if runs_dir.is_dir():
        for path in sorted(runs_dir.glob("*.json")):
            records.append(_load_json(path, FormatError))
    rows = _rows_from_records(records, summary.get("failures", []), model_kinds)
    _write(bundle / "aggregate.csv", aggregate_csv(rows))
    for name, emit in (("roc-test", plots.roc_svg), ("reliability-test", plots.reliability_svg)):
        csv_path = bundle / "curves" / f"{name}.csv"
        if csv_path.exists():
            _write(bundle / "plots" / f"{name}.svg", emit(csv_path.read_text(encoding="utf-8")))
    print(aggregate_csv(rows), end="")
    print(f"report regenerated in {bundle}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_common(sub, *, seed=True, config=True, force=True, mode=False, model=False):
    if config:
        sub.add_argument("--config", help=f"JSON config file or preset name {PRESET_NAMES}")
    if seed:
        sub.add_argument("--seed", type=int, help="master seed (overrides config)")
    if mode:
        sub.add_argument("--mode", choices=MODES, help="evaluation protocol")
    if model:
        sub.add_argument("--model", choices=("lstm", "bilstm", "dkl-lstm", "dkl"), help="model kind")
    if force:
        sub.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dklshift", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"dklshift {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("generate", help="write a synthetic cohort directory")
    p.add_argument("--out", required=True, help="cohort directory to create")
    _add_common(p, mode=True)
    p.set_defaults(func=cmd_generate)

    p = commands.add_parser("preprocess", help="split a cohort and write processed tensors")
    p.add_argument("cohort", help="cohort directory from `generate`")
    p.add_argument("--out", required=True, help="directory for train/val/test binaries")
    _add_common(p, mode=True)
    p.set_defaults(func=cmd_preprocess)

    p = commands.add_parser("train", help="train one model on processed data")
    p.add_argument("data", help="processed directory from `preprocess`")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    _add_common(p, model=True)
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("evaluate", help="run the metric battery on a checkpoint")
    p.add_argument("checkpoint", help="checkpoint file from `train`")
    p.add_argument("data", help="processed split file (e.g. test.bin)")
    p.add_argument("--out", help="optional JSON output path")
    _add_common(p, seed=False, config=False)
    p.set_defaults(func=cmd_evaluate)

    p = commands.add_parser("experiment", help="full preset: generate, train all kinds, report")
    p.add_argument("--out", required=True, help="report bundle directory to create")
    p.add_argument("--runs", type=int, help="runs per model kind (overrides config)")
    p.add_argument("--jobs", type=int, help="worker processes (default: logical cores)")
    _add_common(p, mode=True, model=True)
    p.set_defaults(func=cmd_experiment)

    p = commands.add_parser("report", help="re-emit aggregate table and SVG plots from a bundle")
    p.add_argument("bundle", help="bundle directory from `experiment`")
    _add_common(p, seed=False, config=False, force=False)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ContractError, DimensionError, StateError, UndefinedMetricError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DklShiftError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
