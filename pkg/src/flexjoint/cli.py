"""Command-line entry point: ``flexjoint gen-data | train | eval | report``.

Configuration precedence (lowest to highest): built-in defaults, the JSON file
given with ``--config``, then command-line flags. The output root defaults to
``$FLEXJOINT_OUTPUT`` or ``./runs``. Layout under the output root::

    config.json                 resolved configuration of the last command
    data/record_NNNN.csv        execution records, data/manifest.json
    weights/<model>.fjw         weights, <model>.loss.csv, <model>.config.json
    reports/<experiment>.csv    tables, <experiment>.json summaries

Errors go to stderr prefixed with E-CONFIG, E-DATA, E-TRAIN or E-EVAL.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

from . import io, nn
from . import pipeline as pl
from .models import (FinDwhModel, build_dwh, build_fc_baseline, build_fin, build_rnn_baseline,
                     expected_branch_count, expected_fin_count, load_model)
from .sim import ArmConfig

log = logging.getLogger("flexjoint")

MODEL_NAMES = ("fin", "dwh", "fin-dwh", "fc", "rnn")
DISPLAY = {"fc": "FC", "rnn": "RNN", "dwh": "DWH", "fin-dwh": "FIN-DWH"}
EVAL_NAMES = {"ablation": "ablation_table", "speed-sweep": "speed_sweep", "payload": "payload_study"}
OUTPUT_ENV = "FLEXJOINT_OUTPUT"


class CliError(Exception):
    def __init__(self, prefix, message, code=2):
        super().__init__(f"{prefix} {message}")
        self.code = code


DEFAULTS = {
    "seed": 0,
    "arm": {"n_joints": 3},
    "dataset": {"minutes": 45.0, "tiers": list(pl.DEFAULT_TIERS), "waypoint_prob": 0.6},
    "train": {},
    "experiment": {"n_tests": 100, "max_speed": 1.0, "speeds": [0.2, 0.4, 0.6, 0.8, 1.0, 1.2],
                   "speed_tests": 20, "payloads": [0.25, 0.5, 1.1], "payload_tests": 20},
    "min_epochs": 150,
    "thresholds": {},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CliError("E-CONFIG", f"config file {path} does not exist")
        try:
            cfg = _merge(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise CliError("E-CONFIG", f"{path}: invalid JSON ({exc})")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.n_joints is not None:
        cfg["arm"]["n_joints"] = args.n_joints
    if getattr(args, "minutes", None) is not None:
        cfg["dataset"]["minutes"] = args.minutes
    if getattr(args, "epochs", None) is not None:
        for name in MODEL_NAMES:
            cfg["train"].setdefault(name, {})["epochs"] = args.epochs
    if getattr(args, "n_tests", None) is not None:
        cfg["experiment"]["n_tests"] = args.n_tests
        cfg["experiment"]["speed_tests"] = min(cfg["experiment"]["speed_tests"], args.n_tests)
        cfg["experiment"]["payload_tests"] = min(cfg["experiment"]["payload_tests"], args.n_tests)
    _validate(cfg)
    return cfg


def _validate(cfg):
    if cfg["dataset"]["minutes"] <= 0:
        raise CliError("E-CONFIG", "dataset.minutes must be positive")
    if not cfg["dataset"]["tiers"]:
        raise CliError("E-CONFIG", "dataset.tiers must not be empty")
    for name in cfg["train"]:
        if name not in MODEL_NAMES:
            raise CliError("E-CONFIG", f"train.{name}: unknown model (valid: {', '.join(MODEL_NAMES)})")
    try:
        arm_config(cfg)
    except (TypeError, ValueError) as exc:
        raise CliError("E-CONFIG", f"arm: {exc}")


def arm_config(cfg) -> ArmConfig:
    arm = dict(cfg["arm"])
    for k, v in arm.items():
        if isinstance(v, list):
            arm[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
    return ArmConfig(**arm)


def train_config(cfg, name) -> pl.TrainConfig:
    base = replace(pl.DEFAULT_TRAIN[name], seed=cfg["seed"])
    if name not in ("fin", "fc"):
        base = replace(base, min_epochs=cfg["min_epochs"])
    over = cfg["train"].get(name, {})
    valid = {f.name for f in fields(pl.TrainConfig)}
    bad = set(over) - valid
    if bad:
        raise CliError("E-CONFIG", f"train.{name}: unknown keys {sorted(bad)}")
    return replace(base, **over)


def config_digest(cfg) -> str:
    return io.digest({k: v for k, v in cfg.items() if k != "thresholds"})


def _header(cfg, **extra):
    return {**io.provenance(config_digest(cfg), cfg["seed"]), **extra}


def _out(args) -> Path:
    return Path(args.out or os.environ.get(OUTPUT_ENV) or "runs")


# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg) -> int:
    root = _out(args)
    data_dir = root / "data"
    if data_dir.exists() and any(data_dir.iterdir()) and not args.force:
        raise CliError("E-DATA", f"{data_dir} is not empty; use --force to overwrite")
    data_dir.mkdir(parents=True, exist_ok=True)
    for old in data_dir.glob("record_*.csv*"):
        old.unlink()
    arm = arm_config(cfg)
    ds = pl.DatasetConfig(cfg["dataset"]["minutes"], tuple(cfg["dataset"]["tiers"]),
                          cfg["dataset"]["waypoint_prob"], cfg["seed"])
    t0 = time.perf_counter()
    records = pl.generate_dataset(arm, ds)
    header = _header(cfg)
    files = []
    for k, rec in enumerate(records):
        path = data_dir / f"record_{k:04d}.csv"
        io.write_record(path, rec, header)
        files.append({"file": path.name, "sha256": io.file_digest(path), "max_speed": rec.max_speed})
    minutes = pl.tier_minutes(records)
    manifest = {**header, "n_records": len(records), "n_joints": arm.n_joints,
                "minutes_per_tier": {str(k): v for k, v in sorted(minutes.items())},
                "total_minutes": sum(minutes.values()), "arm": arm.to_dict(),
                "dataset": cfg["dataset"], "files": files}
    io.write_json(data_dir / "manifest.json", manifest)
    io.write_sidecar(data_dir / "manifest.json", seconds=time.perf_counter() - t0)
    _snapshot(root, cfg)
    print(f"wrote {len(records)} records ({manifest['total_minutes']:.1f} min) to {data_dir}")
    for k, v in manifest["minutes_per_tier"].items():
        print(f"  tier {k} rad/s: {v:.2f} min")
    return 0


def _snapshot(root, cfg):
    io.write_json(root / "config.json", cfg)


def load_records(root):
    data_dir = root / "data"
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.is_file():
        raise CliError("E-DATA", f"no dataset at {data_dir}; run `flexjoint gen-data` first")
    manifest = io.read_json(manifest_path)
    records = []
    for entry in manifest["files"]:
        path = data_dir / entry["file"]
        if not path.is_file():
            raise CliError("E-DATA", f"{path} listed in the manifest is missing")
        records.append(io.read_record(path))
    return manifest, records


def _expected_count(name, n):
    if name in ("fin", "fc"):
        return expected_fin_count(n)
    if name == "dwh":
        return 2 * expected_branch_count(6 * n, n)
    if name == "fin-dwh":
        return 2 * expected_branch_count(8 * n, n) + expected_fin_count(n)
    return None


def cmd_train(args, cfg) -> int:
    name = args.model
    root = _out(args)
    manifest, records = load_records(root)
    n = manifest["n_joints"]
    tc = train_config(cfg, name)
    wdir = root / "weights"
    wdir.mkdir(parents=True, exist_ok=True)
    seed = tc.seed
    t0 = time.perf_counter()
    progress = (lambda e, tr, va: print(f"  epoch {e:4d} train {tr:.6g} val {va:.6g}", flush=True)) \
        if args.verbose else None
    try:
        if name == "fin":
            model = build_fin(n, seed)
            data = records
        elif name == "fin-dwh":
            fin_path = wdir / "fin.fjw"
            if not fin_path.is_file():
                raise CliError("E-TRAIN", f"{fin_path} missing; run `flexjoint train fin` first")
            fin = load_model(fin_path)
            model = FinDwhModel(n, fin, seed)
            data = pl.her_invert(records)
        else:
            builders = {"dwh": lambda: build_dwh(n, seed=seed), "fc": lambda: build_fc_baseline(n, seed),
                        "rnn": lambda: build_rnn_baseline(n, 14, seed)}
            model = builders[name]()
            data = pl.her_invert(records)
        train, val = pl.split_records(data, tc.val_fraction, seed)
        result = pl.train_model(model, train, val, tc, sequence=name not in ("fin", "fc"), progress=progress)
    except pl.TrainingError as exc:
        raise CliError("E-TRAIN", str(exc).removeprefix("E-TRAIN "))
    count = model.count_parameters()
    expected = _expected_count(name, n)
    if expected is not None and count != expected:
        raise CliError("E-TRAIN", f"parameter count {count} differs from the expected {expected}")
    header = _header(cfg, model=name)
    meta = {**header, "train": asdict(tc), "epochs_run": len(result.val_loss),
            "best_epoch": result.best_epoch, "best_val": min(result.val_loss),
            "dataset_digest": io.file_digest(root / "data" / "manifest.json")}
    path = wdir / f"{name}.fjw"
    nn.save_weights(model, path, seed, meta)
    io.write_table(wdir / f"{name}.loss.csv", ["epoch", "train_loss", "val_loss"],
                   [[k, a, b] for k, (a, b) in enumerate(zip(result.train_loss, result.val_loss))], header)
    io.write_json(wdir / f"{name}.config.json", {**header, "train": asdict(tc), "config": cfg})
    io.write_sidecar(path, seconds=time.perf_counter() - t0)
    _snapshot(root, cfg)
    check = "" if expected is None else f" (expected {expected}: ok)"
    print(f"{name}: {count} parameters{check}; best val MSE {min(result.val_loss):.6g} "
          f"at epoch {result.best_epoch} of {len(result.val_loss)}; wrote {path}")
    return 0


def _available_models(root, names):
    models = {}
    for name in names:
        path = root / "weights" / f"{name}.fjw"
        if path.is_file():
            models[DISPLAY[name]] = load_model(path)
    return models


def cmd_eval(args, cfg) -> int:
    if args.experiment not in EVAL_NAMES:
        raise CliError("E-EVAL", f"unknown experiment {args.experiment!r}; valid: {', '.join(EVAL_NAMES)}")
    kind = EVAL_NAMES[args.experiment]
    root = _out(args)
    arm = arm_config(cfg)
    exp = cfg["experiment"]
    ec = pl.ExperimentConfig(exp["n_tests"], exp["max_speed"], tuple(exp["speeds"]), exp["speed_tests"],
                             tuple(exp["payloads"]), exp["payload_tests"], cfg["seed"])
    wanted = args.models.split(",") if args.models else list(DISPLAY)
    for name in wanted:
        if name not in DISPLAY:
            raise CliError("E-EVAL", f"unknown model {name!r}; valid: {', '.join(DISPLAY)}")
    if args.models:
        missing = [n for n in wanted if not (root / "weights" / f"{n}.fjw").is_file()]
        if missing:
            raise CliError("E-EVAL", f"missing weights for {', '.join(missing)}; "
                                     f"run `flexjoint train {missing[0]}` first")
    models = _available_models(root, wanted)
    if kind == "payload_study" and "FIN-DWH" not in models:
        raise CliError("E-EVAL", "payload study needs fin-dwh weights; run `flexjoint train fin-dwh` first")
    t0 = time.perf_counter()
    report = pl.run_experiment(kind, arm, ec, models, jobs=args.jobs)
    header = _header(cfg, experiment=kind)
    files = io.write_report(root / "reports", report, header)
    timings = io.report_timings(report)
    for f in files:
        io.write_sidecar(f, seconds=time.perf_counter() - t0, jobs=args.jobs, timings=timings)
    _snapshot(root, cfg)
    print(format_report(io.read_json(root / "reports" / f"{kind}.json"), timings))
    failures = check_thresholds(report, cfg["thresholds"])
    for msg in failures:
        print(f"E-EVAL threshold violated: {msg}", file=sys.stderr)
    return 1 if failures else 0


def check_thresholds(report, thresholds) -> list:
    """``{"<Model>.<metric>_improvement_pct": minimum}`` or ``{"<Model>.<metric>": maximum}``."""
    failures = []
    for key, limit in thresholds.items():
        model, _, metric = key.partition(".")
        try:
            value = report.row(model, None)[metric]
        except KeyError:
            failures.append(f"{key}: no such value in the report")
            continue
        if metric.endswith("_pct") and value < limit:
            failures.append(f"{key} = {value:.3f} < {limit}")
        elif not metric.endswith("_pct") and value > limit:
            failures.append(f"{key} = {value:.4g} > {limit}")
    return failures


def format_report(summary, timings=None) -> str:
    timings = timings or {}
    lines = [f"== {summary['experiment']} (seed {summary['seed']}, config {summary['config_digest'][:12]})"]
    lines.append(f"{'model':10s} {'cond':>6s} {'e_pos [rad]':>20s} {'e_eef [cm]':>16s} "
                 f"{'extra [s]':>16s} {'capped':>6s} {'infer [ms]':>10s}")
    for r in summary["rows"]:
        cond = "" if r["condition"] is None else f"{r['condition']:g}"
        imp = r.get("e_pos_improvement_pct")
        imp = f" ({imp:+.0f}%)" if imp is not None else ""
        infer = timings.get(f"{r['model']}@{r['condition']}", {}).get("inference_s")
        infer = f"{1000 * infer:10.2f}" if infer is not None else f"{'-':>10s}"
        lines.append(f"{r['model']:10s} {cond:>6s} {r['e_pos']:.4f}±{r['e_pos_ci']:.4f}{imp:>7s} "
                     f"{100 * r['e_eef']:6.3f}±{100 * r['e_eef_ci']:.3f} "
                     f"{r['extra_time']:7.3f}±{r['extra_time_ci']:.3f} {r['n_capped']:6d} {infer}")
    ref = summary.get("reference")
    if ref:
        t1 = ref["table1_e_pos_rad"]
        lines.append("hardware reference (not comparable): e_pos baseline {0[0]}±{0[1]}, FIN-DWH {1[0]}±{1[1]}; "
                     "e_eef {2[Baseline]}→{2[FIN-DWH]} cm; extra time {3[Baseline]}→{3[FIN-DWH]} s".format(
                         t1["Baseline"], t1["FIN-DWH"], ref["table2_e_eef_cm"], ref["table2_extra_time_s"]))
    return "\n".join(lines)


def cmd_report(args, cfg) -> int:
    rdir = _out(args) / "reports"
    found = sorted(rdir.glob("*.json")) if rdir.is_dir() else []
    found = [p for p in found if not p.name.endswith(".meta.json")]
    if not found:
        raise CliError("E-EVAL", f"no reports in {rdir}; run `flexjoint eval ablation` first")
    texts = []
    for p in found:
        meta = p.with_name(p.name + ".meta.json")
        timings = io.read_json(meta).get("timings") if meta.is_file() else None
        texts.append(format_report(io.read_json(p), timings))
    print("\n\n".join(texts))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", help=f"output root (default ${OUTPUT_ENV} or ./runs)")
    common.add_argument("--seed", type=int)
    common.add_argument("--n-joints", type=int, dest="n_joints")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="flexjoint", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="simulate the training dataset")
    g.add_argument("--minutes", type=float)
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("model", choices=MODEL_NAMES)
    t.add_argument("--epochs", type=int)
    e = sub.add_parser("eval", parents=[common], help="run an experiment")
    e.add_argument("experiment", help=f"one of {', '.join(EVAL_NAMES)}")
    e.add_argument("--models", help="comma-separated subset of " + ",".join(DISPLAY))
    e.add_argument("--n-tests", type=int, dest="n_tests")
    e.add_argument("--jobs", type=int, default=1, help="evaluation worker processes")
    sub.add_parser("report", parents=[common], help="print all reports")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
