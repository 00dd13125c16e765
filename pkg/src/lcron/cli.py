"""Command-line entry point: ``lcron <subcommand> [flags]``.

Settings resolve in order: preset, then ``--config`` file, then flags. The
config file holds one ``key = value`` per line with ``#`` comments; keys are
the long flag names with dashes or underscores. Outputs go to ``--out``,
else ``$LCRON_OUTPUT_DIR``, else ``./lcron_output``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import harness
from .numerics import InvalidArgument
from .sampling import DatasetFormatError, SynthConfig, generate_dataset, write_dataset

OUTPUT_ENV = "LCRON_OUTPUT_DIR"


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v != "")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v != "")


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, target, field)
EXPERIMENT_KEYS = {
    "method": (str, "exp", "method"),
    "operator": (str, "exp", "operator"),
    "temperature": (float, "exp", "temperature"),
    "train_quotas": (_ints, "exp", "train_quotas"),
    "serving_quotas": (_ints, "exp", "serving_quotas"),
    "dataset": (str, "exp", "dataset_path"),
    "lr": (float, "exp", "lr"),
    "batch_size": (int, "exp", "batch_size"),
    "epochs": (int, "exp", "epochs"),
    "seed": (int, "exp", "seed"),
    "eval_mode": (str, "exp", "eval_mode"),
    "incremental": (_bool, "exp", "incremental"),
    "fixed_weights": (_floats, "exp", "fixed_weights"),
    "hidden": (_ints, "exp", "hidden"),
    "embedding_dim": (int, "exp", "embedding_dim"),
    "diag_impressions": (int, "exp", "diag_impressions"),
    "n_users": (int, "synth", "n_users"),
    "n_items": (int, "synth", "n_items"),
    "feature_dim": (int, "synth", "feature_dim"),
    "stage_counts": (_ints, "synth", "stage_counts"),
    "noise_scales": (_floats, "synth", "noise_scales"),
    "pool_size": (int, "synth", "pool_size"),
    "reference_quotas": (_ints, "synth", "reference_quotas"),
    "interaction": (float, "synth", "interaction"),
    "n_days": (int, "synth", "n_days"),
    "impressions_per_day": (int, "synth", "impressions_per_day"),
    "data_seed": (int, "synth", "seed"),
    "collapse_negative_grades": (_bool, "synth", "collapse_negative_grades"),
}


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise harness.ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in EXPERIMENT_KEYS and key != "preset":
            raise harness.ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def build_config(args: argparse.Namespace) -> harness.ExperimentConfig:
    """Merge preset, config file and flags, later sources winning."""
    settings: dict = {}
    file_settings = read_config_file(args.config) if args.config else {}
    preset = args.preset or file_settings.pop("preset", None) or "default"
    file_settings.pop("preset", None)
    settings.update(file_settings)
    for key in EXPERIMENT_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            settings[key] = v
    cfg = harness.preset(preset)
    exp_kw, synth_kw = {}, {}
    for key, raw in settings.items():
        parse, target, name = EXPERIMENT_KEYS[key]
        try:
            value = parse(raw) if isinstance(raw, str) or parse is _bool else raw
        except ValueError as exc:
            raise harness.ConfigError(f"bad value for {key}: {exc}") from None
        (exp_kw if target == "exp" else synth_kw)[name] = value
    if synth_kw:
        if "noise_scales" not in synth_kw and "stage_counts" in synth_kw:
            synth_kw["noise_scales"] = (1.0,) * (len(synth_kw["stage_counts"]) - 1)
        # the default funnel is derived from the pool size and the counts
        if ("stage_counts" in synth_kw or "pool_size" in synth_kw) and "reference_quotas" not in synth_kw:
            synth_kw["reference_quotas"] = None
        if "stage_counts" in synth_kw:
            synth_kw["stage_names"] = None
        fields = {f.name: getattr(cfg.synth, f.name) for f in dataclasses.fields(SynthConfig)}
        fields.update(synth_kw)
        exp_kw["synth"] = SynthConfig(**fields)
    return harness.with_overrides(cfg, **exp_kw)


def output_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or "lcron_output")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(cfg: harness.ExperimentConfig):
    data = harness.load_data(cfg)
    cfg.validate(harness.gt_count(data), data.n_items)
    return data


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# --- subcommands --------------------------------------------------------------------


def cmd_generate(args, cfg) -> int:
    cfg.synth.validate()
    log = generate_dataset(cfg.synth)
    path = Path(args.output) if args.output else output_dir(args) / "dataset.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(path, log)
    print(f"wrote {len(log)} impressions over {cfg.synth.n_days} days to {path}")
    return 0


def cmd_train(args, cfg) -> int:
    data = _load(cfg)
    out = output_dir(args)
    ckpt = out / f"{args.stem}.npz"
    rep = harness.run_experiment(cfg, data, checkpoint=ckpt)
    paths = harness.write_report(rep, out, args.stem)
    _write_json(out / f"{args.stem}_config.json", cfg.to_dict())
    print(paths["summary"].read_text(), end="")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_eval(args, cfg) -> int:
    data = _load(cfg)
    days = data.day_numbers()
    day = days[-1] if args.day is None else args.day
    if day not in days:
        raise harness.ConfigError(f"day {day} not in dataset days {days[0]}..{days[-1]}")
    cascade = harness.cascade_from_checkpoint(cfg, args.checkpoint, data.feature_dim)
    metrics = harness.evaluate(cascade, data.select_days([day]), cfg, day)
    rep = harness.MetricsReport(cfg.method, cfg.seed, [metrics], {})
    paths = harness.write_report(rep, output_dir(args), args.stem)
    print(paths["summary"].read_text(), end="")
    return 0


def cmd_stream(args, cfg) -> int:
    data = _load(cfg)
    rep = harness.streaming_eval(cfg, data)
    paths = harness.write_report(rep, output_dir(args), args.stem)
    print(paths["summary"].read_text(), end="")
    print(f"per-day series: {paths['csv']}")
    return 0


def cmd_diagnose(args, cfg) -> int:
    data = _load(cfg)
    res = harness.diagnostics_run(cfg, data)
    path = output_dir(args) / f"{args.stem}.json"
    _write_json(path, res)
    for phase in ("before", "after"):
        stats = ", ".join(f"{k}={v:.6g}" for k, v in sorted(res[phase].items()))
        print(f"{phase}: {stats}")
    return 0


def cmd_sweep(args, cfg) -> int:
    data = _load(cfg)
    methods = [m.strip() for m in args.methods.split(",")] if args.methods else [cfg.method]
    temps = _floats(args.temperatures) if args.temperatures else (cfg.temperature,)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    rows, per_config = [], {}
    for m in methods:
        grid = temps if m in harness.USES_TEMPERATURE else (cfg.temperature,)
        for t in grid:
            run_cfg = harness.with_overrides(cfg, method=m, temperature=float(t))
            vals = []
            for s in seeds:
                rep = harness.run_experiment(harness.with_overrides(run_cfg, seed=s), data, holdout=args.holdout)
                vals.append(rep.days[0].joint_recall)
            mean, std = harness.mean_std(vals)
            per_config[(m, float(t))] = vals
            rows.append({"method": m, "temperature": float(t), "seeds": len(vals),
                         "joint_recall_mean": mean, "joint_recall_std": std})
    ref_key = next(iter(per_config))
    for r in rows:
        key = (r["method"], r["temperature"])
        if key == ref_key or len(seeds) < 2:
            r["p_value_vs_first"] = None
        else:
            r["p_value_vs_first"] = harness.compare(per_config[ref_key], per_config[key])["p_value"]
    out = output_dir(args)
    harness.write_rows_csv(out / f"{args.stem}.csv", rows)
    table = harness.summary_table(rows)
    (out / f"{args.stem}_summary.txt").write_text(table)
    print(table, end="")
    return 0


COMMANDS = {
    "generate": (cmd_generate, "write a synthetic cascade log"),
    "train": (cmd_train, "train on all but the last day, evaluate the last day, save a checkpoint"),
    "eval": (cmd_eval, "evaluate a saved checkpoint on one day"),
    "stream": (cmd_stream, "day-by-day evaluation, training on every earlier day"),
    "diagnose": (cmd_diagnose, "bound-gap statistics before and after training"),
    "sweep": (cmd_sweep, "grid over methods and temperatures with several seeds"),
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--preset", choices=harness.PRESETS, help="base configuration (default: default)")
    p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or ./lcron_output)")
    p.add_argument("--stem", default="metrics", help="file name stem for outputs")
    for key, (parse, _, _) in EXPERIMENT_KEYS.items():
        flag = "--" + key.replace("_", "-")
        if parse is _bool:
            p.add_argument(flag, type=_bool, metavar="BOOL")
        else:
            p.add_argument(flag, type=str, metavar=key.upper())


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcron", description="Cascade ranking experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "generate":
            p.add_argument("--output", help="dataset path (default: <out>/dataset.jsonl)")
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--day", type=int, help="day to evaluate (default: last)")
        if name == "sweep":
            p.add_argument("--methods", help="comma-separated methods (default: --method)")
            p.add_argument("--temperatures", help="comma-separated temperature grid")
            p.add_argument("--seeds", type=int, default=5, help="seeds per configuration")
            p.add_argument("--holdout", choices=("validation", "test"), default="validation")
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
        return COMMANDS[args.command][0](args, cfg)
    except (InvalidArgument, DatasetFormatError, OSError) as exc:
        print(f"lcron {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
