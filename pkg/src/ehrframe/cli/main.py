"""``ehrframe`` command line: synth, prepare, pretrain, finetune, experiment, explain."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from datetime import datetime
from pathlib import Path

import numpy as np

from .. import cohort as co
from ..eval import ExperimentConfig, StatsError, report, run_experiments, save_metrics
from ..explain import explain_stays, save_attributions, save_summary, summarize
from ..model import ModelConfigError, TimeframeModel
from ..numcore import stream
from ..train import TrainConfigError, evaluate_auc, finetune, pretrain, save_pretrain_checkpoint
from .config import ConfigError, RunConfig, load_config, model_config, synth_config, train_plan

log = logging.getLogger("ehrframe")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def make_run_dir(root: str | Path, command: str) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    root = Path(root)
    path = root / f"{command}-{stamp}"
    n = 1
    while path.exists():
        n += 1
        path = root / f"{command}-{stamp}-{n}"
    path.mkdir(parents=True)
    return path


def _require(path: str | Path | None, what: str) -> Path:
    if not path:
        raise UsageError(f"no {what} given")
    path = Path(path)
    if not path.exists() and not path.with_suffix(path.suffix + ".json").exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _load_records(cfg: RunConfig):
    data = cfg["data"]
    schema = co.load_schema(_require(data["schema"], "schema file (data.schema)"))
    records = co.load_cohort(_require(data["cohort"], "cohort file (data.cohort)"), schema,
                             t1_hours=data["t1_hours"], t2_hours=data["t2_hours"])
    return records, schema


def _tensors(cfg: RunConfig, records, schema):
    data = cfg["data"]
    tensors, skipped = co.tensorize(records, schema, data["h_hours"], data["p_max"])
    if skipped:
        log.warning("skipped %d stays without usable frames", len(skipped))
    return tensors, skipped


def _split(cfg: RunConfig, tensors, seed: int):
    data = cfg["data"]
    rng = stream(seed, "split")
    if data["split_mode"] == "by_year":
        return co.split_by_year(tensors, data["train_years"], data["test_years"], data["val_fraction"], rng)
    if data["split_mode"] == "random":
        return co.split_random(tensors, data["test_fraction"], data["val_fraction"], rng)
    raise ConfigError(f"data.split_mode must be 'by_year' or 'random', got {data['split_mode']!r}")


# -- subcommands -------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args, out: Path) -> dict:
    cohort = co.synth_generate(synth_config(cfg), stream(cfg["data"]["seed"], "synth"))
    co.save_cohort(cohort.records, out / "cohort.tsv")
    co.save_schema(cohort.schema, out / "schema.txt")
    co.save_ground_truth(cohort, out / "ground_truth.tsv")
    labels = cohort.labels()
    return {"cohort": str(out / "cohort.tsv"), "schema": str(out / "schema.txt"), "stays": len(labels),
            "positives": int(labels.sum()), "prevalence": float(labels.mean())}


def cmd_prepare(cfg: RunConfig, args, out: Path) -> dict:
    records, schema = _load_records(cfg)
    tensors, skipped = _tensors(cfg, records, schema)
    train, val, test = _split(cfg, tensors, cfg["data"]["seed"])
    stats, reduced = co.fit_normalization(train, schema)
    sizes = {}
    for name, part in (("train", train), ("val", val), ("test", test)):
        if part:
            co.apply_normalization(co.TensorSet.from_tensors(part, schema.columns), stats).save(out / f"{name}.npz")
        sizes[name] = len(part)
    stats.save(out / "stats.json")
    (out / "prepared.json").write_text(json.dumps(
        {"k": reduced.k, "m": reduced.m, "columns": reduced.columns, "sizes": sizes, "skipped": skipped,
         "split_mode": cfg["data"]["split_mode"]}, indent=1))
    return {"sizes": sizes, "k": reduced.k, "m": reduced.m, "dropped": stats.dropped}


def _prepared(path) -> tuple[Path, dict]:
    path = _require(path, "prepared data directory (--data)")
    meta_path = path / "prepared.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{path} is not a prepared data directory (no prepared.json)")
    return path, json.loads(meta_path.read_text())


def _load_split(path: Path, name: str) -> co.TensorSet | None:
    f = path / f"{name}.npz"
    return co.TensorSet.load(f) if f.exists() else None


def cmd_pretrain(cfg: RunConfig, args, out: Path) -> dict:
    path, meta = _prepared(args.data)
    train = _load_split(path, "train")
    seed = cfg["data"]["seed"]
    model = TimeframeModel(model_config(cfg, meta["k"], meta["m"], seed))
    plan = train_plan(cfg, "pretrain", seed)
    result = pretrain(model, train, plan, curve_path=out / "pretrain_curve.csv")
    save_pretrain_checkpoint(result, plan, out / "pretrain")
    return {"checkpoint": str(out / "pretrain.json"), "steps": len(result.losses),
            "first_loss": result.losses[0], "last_loss": result.losses[-1]}


def cmd_finetune(cfg: RunConfig, args, out: Path) -> dict:
    path, meta = _prepared(args.data)
    train, val, test = (_load_split(path, n) for n in ("train", "val", "test"))
    seed = cfg["data"]["seed"]
    if args.init:
        model, _, _ = TimeframeModel.load(_require(args.init, "init checkpoint"))
    else:
        model = TimeframeModel(model_config(cfg, meta["k"], meta["m"], seed))
    result = finetune(model, train, val, train_plan(cfg, "finetune", seed), curve_path=out / "finetune_curve.csv",
                      metrics_path=out / "epochs.csv", checkpoint=out / "finetune")
    summary = {"checkpoint": str(out / "finetune.json"), "best_epoch": result.best_epoch,
               "val_auc": result.val_auc}
    if test is not None and len(np.unique(test.labels)) == 2:
        summary["test_auc"] = evaluate_auc(result.model, test)
    (out / "metrics.json").write_text(json.dumps(summary, indent=1))
    return summary


def _experiment_inputs(cfg: RunConfig, out: Path):
    if cfg["data"]["cohort"]:
        records, schema = _load_records(cfg)
    else:
        log.info("no data.cohort configured; generating the synthetic cohort from [synth]")
        cohort = co.synth_generate(synth_config(cfg), stream(cfg["data"]["seed"], "synth"))
        records, schema = cohort.records, cohort.schema
        co.save_ground_truth(cohort, out / "ground_truth.tsv")
    tensors, _ = _tensors(cfg, records, schema)
    return tensors, schema


def cmd_experiment(cfg: RunConfig, args, out: Path) -> dict:
    data, ev = cfg["data"], cfg["eval"]
    tensors, schema = _experiment_inputs(cfg, out)
    exp = ExperimentConfig(
        model=model_config(cfg, schema.k, schema.m, ev["base_seed"]),
        pretrain=train_plan(cfg, "pretrain", ev["base_seed"]),
        finetune=train_plan(cfg, "finetune", ev["base_seed"]),
        variants=tuple(ev["variants"]), n_runs=ev["n_runs"], base_seed=ev["base_seed"],
        split_mode=data["split_mode"], train_years=data["train_years"], test_years=data["test_years"],
        val_fraction=data["val_fraction"], test_fraction=data["test_fraction"])
    rows = run_experiments(tensors, schema, exp)
    save_metrics(rows, out / "metrics.csv")
    rep = report(rows)
    rep.save_csv(out / "report.csv")
    text = rep.text()
    (out / "report.txt").write_text(text)
    if args.report:
        Path(args.report).write_text(text)
    print(text, end="")
    return {"rows": len(rows), "split_mode": data["split_mode"],
            "summary": {s["variant"]: [s["mean_auc"], s["std_auc"]] for s in rep.summary}}


def cmd_explain(cfg: RunConfig, args, out: Path) -> dict:
    ex = cfg["explain"]
    model, _, _ = TimeframeModel.load(_require(args.checkpoint, "checkpoint (--checkpoint)"))
    path, meta = _prepared(args.data)
    target = _load_split(path, "test") or _load_split(path, "train")
    background = _load_split(path, "train")
    atts = explain_stays(model, target, background, ex["n_stays"], ex["n_baselines"], ex["n_samples"], ex["seed"])
    save_attributions(atts, out / "attributions.csv")
    rows = summarize(atts, target.columns, ex["top_n"])
    save_summary(rows, out / "summary.csv")
    return {"stays": len(atts), "top": [r["feature_id"] for r in rows[:5]]}


COMMANDS = {"synth": cmd_synth, "prepare": cmd_prepare, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "experiment": cmd_experiment, "explain": cmd_explain}

# flag -> config key, applied after the config file and --set
FLAG_KEYS = {
    "synth": {"n_stays": "synth.n_stays", "prevalence": "synth.prevalence", "seed": "data.seed"},
    "prepare": {"cohort": "data.cohort", "schema": "data.schema", "split_mode": "data.split_mode",
                "seed": "data.seed"},
    "pretrain": {"epochs": "pretrain.epochs", "embedder": "model.embedder", "seed": "data.seed"},
    "finetune": {"epochs": "finetune.epochs", "embedder": "model.embedder", "seed": "data.seed"},
    "experiment": {"variants": "eval.variants", "runs": "eval.n_runs", "base_seed": "eval.base_seed",
                   "cohort": "data.cohort", "schema": "data.schema", "split_mode": "data.split_mode"},
    "explain": {"n_stays": "explain.n_stays", "n_samples": "explain.n_samples", "seed": "explain.seed"},
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--out", default="runs", help="root for timestamped run directories (default: runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ehrframe", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--n-stays", type=int)
    p.add_argument("--prevalence", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("prepare", parents=[common], help="bin, split and normalise a cohort")
    p.add_argument("--cohort")
    p.add_argument("--schema")
    p.add_argument("--split-mode", choices=("by_year", "random"))
    p.add_argument("--seed", type=int)

    for name, what in (("pretrain", "masked-timeframe pretraining"), ("finetune", "supervised fine-tuning")):
        p = sub.add_parser(name, parents=[common], help=what)
        p.add_argument("--data", required=True, help="prepared data directory")
        p.add_argument("--epochs", type=int)
        p.add_argument("--embedder", choices=("gct", "linear"))
        p.add_argument("--seed", type=int)
        if name == "finetune":
            p.add_argument("--init", help="checkpoint to start from (e.g. a pretrain checkpoint)")

    p = sub.add_parser("experiment", parents=[common], help="repeated-split variant comparison")
    p.add_argument("--variants", help="comma-separated, e.g. full,no_gct")
    p.add_argument("--runs", type=int)
    p.add_argument("--base-seed", type=int)
    p.add_argument("--cohort")
    p.add_argument("--schema")
    p.add_argument("--split-mode", choices=("by_year", "random"))
    p.add_argument("--report", help="also write the text report here")

    p = sub.add_parser("explain", parents=[common], help="expected-gradients attributions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="prepared data directory")
    p.add_argument("--n-stays", type=int)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--seed", type=int)
    return parser


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    for flag, key in FLAG_KEYS[args.command].items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("ehrframe: error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"ehrframe: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"ehrframe: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    out = make_run_dir(args.out, args.command)
    cfg.save(out / "config.ini")
    started = time.perf_counter()
    try:
        summary = COMMANDS[args.command](cfg, args, out)
    except (UsageError, ConfigError, ModelConfigError, TrainConfigError, co.ConfigurationError) as exc:
        print(f"ehrframe: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, co.CohortError, StatsError, ValueError, FloatingPointError) as exc:
        print(f"ehrframe: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    summary["run_dir"] = str(out)
    summary["seconds"] = round(time.perf_counter() - started, 2)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, default=str))
    print(json.dumps(summary, default=str))
    return EXIT_OK
