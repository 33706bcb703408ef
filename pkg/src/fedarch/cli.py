"""Command-line experiment runner.

    fedarch run <config|preset> [--output DIR] [--set path=value ...]
    fedarch sweep <config|preset> [--axis FIELD --values V1,V2,...] [--output DIR]
    fedarch gap <config|preset> [--output DIR]
    fedarch plotdata <dir> [<dir> ...] [--output FILE]
    fedarch validate <config|preset>
    fedarch presets [--dump NAME]

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
Relative output directories resolve against ``$FEDARCH_OUTPUT_ROOT`` when set,
otherwise against the working directory.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .config import (
    PRESET_MODELS,
    ConfigError,
    ExperimentConfig,
    dump_config,
    is_numeric_field,
    load_config,
    parse_config,
    preset,
    preset_names,
    resolve_path,
    with_value,
    yaml_load,
)
from .data import Dataset, atomic_write_bytes, channel_stats, generate_synthetic, load_flds, normalize
from .federation import SERIAL, RunResult, run, train_centralized
from .metrics import format_number, rounds_to_target, target_from_baseline, transmitted_size
from .models import ModelSpec
from .partition import PartitionReport, partition_label_skew, partition_preset

OUTPUT_ROOT_ENV = "FEDARCH_OUTPUT_ROOT"
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def output_dir(cfg: ExperimentConfig, override: str | os.PathLike | None = None) -> Path:
    path = Path(override if override is not None else cfg.report.output_dir)
    if path.is_absolute():
        return path
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / path if root else path


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    if d.source == "flds":
        dataset = load_flds(d.path)
        m = cfg.model
        if dataset.shape != (m.channels, m.image_size, m.image_size) or dataset.num_classes != m.num_classes:
            raise ConfigError([("model", f"does not match FLDS file {d.path} "
                                         f"(shape {dataset.shape}, {dataset.num_classes} classes)")])
    else:
        dataset = generate_synthetic(d.synthetic_spec())
    if d.normalize:
        mean, std = channel_stats(dataset)
        dataset = normalize(dataset, mean, std)
    return dataset


def build_partition(cfg: ExperimentConfig, dataset: Dataset) -> PartitionReport:
    p = cfg.partition
    if p.class_assignment is not None:
        table = [[(int(c), float(f)) for c, f in client] for client in p.class_assignment]
        return partition_label_skew(dataset, table, p.seed)
    return partition_preset(dataset, p.preset, p.num_clients, p.seed)


def rounds_csv(result: RunResult) -> str:
    """One row per round; client columns only for clients holding a val set."""
    first = result.records[0].per_client_val_acc if result.records else ()
    clients = [i for i, v in enumerate(first) if v is not None]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "global_test_acc", *[f"client{i}_val_acc" for i in clients],
                "cumulative_transmitted_params", "mean_weight_divergence", "wall_ms"])
    for r in result.records:
        w.writerow([r.round, format_number(r.global_test_acc),
                    *[format_number(r.per_client_val_acc[i]) for i in clients],
                    r.cumulative_transmitted_params, format_number(r.mean_weight_divergence), r.wall_ms])
    return buf.getvalue()


def forgetting_csv(result: RunResult) -> str:
    """Per-visit val accuracies for serial runs; header only for parallel runs."""
    trace = result.forgetting
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if trace is None:
        first = result.records[0].per_client_val_acc if result.records else ()
        clients = [i for i, v in enumerate(first) if v is not None]
        w.writerow(["visit", "client_id", *[f"client{i}_val_acc" for i in clients]])
        return buf.getvalue()
    w.writerow(["visit", "client_id", *[f"client{i}_val_acc" for i in range(trace.num_clients)]])
    for visit, cid, accs in trace.rows:
        w.writerow([visit, cid, *[format_number(a) for a in accs]])
    return buf.getvalue()


def _json_number(x):
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return x


def summarize(cfg: ExperimentConfig, result: RunResult, target: float, baseline: float | None) -> dict:
    accs = result.accuracies
    r_target = rounds_to_target(accs, target)
    participants = (result.num_clients if cfg.federation.algorithm in SERIAL
                    else math.ceil(cfg.federation.sample_fraction * result.num_clients))
    return {
        "name": cfg.name,
        "algorithm": cfg.federation.algorithm,
        "final_accuracy": accs[-1],
        "best_accuracy": max(accs),
        "target_accuracy": target,
        "baseline_accuracy": baseline,
        "rounds_to_target": _json_number(r_target),
        "transmitted_size": _json_number(transmitted_size(r_target, result.param_count)),
        "transmitted_size_detailed": _json_number(
            transmitted_size(r_target, result.param_count, participants=participants)
            if r_target != math.inf else math.inf),
        "param_count": result.param_count,
        "num_clients": result.num_clients,
        "rounds": len(accs),
        "mean_ks": result.report.mean_ks if result.report is not None else None,
        "seed": cfg.federation.seed,
        "config": cfg.to_dict(),
    }


def write_json(path: Path, payload: dict) -> None:
    atomic_write_bytes(path, (json.dumps(payload, indent=2, allow_nan=False) + "\n").encode())


def resolve_target(cfg: ExperimentConfig, spec: ModelSpec, dataset: Dataset) -> tuple[float, float | None]:
    if cfg.report.target != "auto":
        return float(cfg.report.target), None
    fed = replace(cfg.federation, algorithm="fedavg", num_clients=None)
    baseline = train_centralized(fed, spec, dataset).accuracies[-1]
    # a baseline at chance level would give a vacuous target; keep it in (0, 1]
    return max(target_from_baseline(baseline, cfg.report.baseline_ratio), 1e-9), baseline


def run_experiment(cfg: ExperimentConfig, out: str | os.PathLike | None = None) -> dict:
    """Run one configured experiment and write rounds.csv, forgetting.csv and
    summary.json. Returns the summary."""
    out_dir = output_dir(cfg, out)
    dataset = build_dataset(cfg)
    report = build_partition(cfg, dataset)
    spec = cfg.model
    result = run(cfg.federation, report, spec, dataset, record_wall_time=cfg.report.record_wall_time)
    target, baseline = resolve_target(cfg, spec, dataset)
    summary = summarize(cfg, result, target, baseline)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out_dir / "rounds.csv", rounds_csv(result).encode())
    atomic_write_bytes(out_dir / "forgetting.csv", forgetting_csv(result).encode())
    write_json(out_dir / "summary.json", summary)
    return summary


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence, out: str | os.PathLike | None = None) -> dict:
    """Run ``cfg`` once per value of ``axis``; every run keeps the base seed so
    that runs differ only in the swept field. Writes ``sweep_index.json``."""
    if not is_numeric_field(axis):
        raise ConfigError([(axis, "sweep axis must name a numeric config field")])
    configs = [with_value(cfg, axis, v) for v in values]
    root = output_dir(cfg, out)
    index = {"axis": resolve_path(axis), "runs": []}
    for value, sub in zip(values, configs):
        tag = f"{axis}={format_number(value)}"
        sub = replace(sub, name=f"{cfg.name}-{tag}")
        run_experiment(sub, root / tag)
        index["runs"].append({"value": value, "dir": tag})
    write_json(root / "sweep_index.json", index)
    return index


def plotdata(dirs: Sequence[str | os.PathLike]) -> tuple[str, list[str]]:
    """Long-format table (run_id, round, metric, value) over every rounds.csv.
    Values are copied verbatim from the source files. Returns the CSV text and
    a warning per unreadable directory."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run_id", "round", "metric", "value"])
    problems = []
    for d in dirs:
        path = Path(d) / "rounds.csv"
        try:
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
            header, body = rows[0], rows[1:]
            if header[:2] != ["round", "global_test_acc"] or any(len(r) != len(header) for r in body):
                raise ValueError("malformed rounds.csv")
        except (OSError, IndexError, ValueError, csv.Error) as exc:
            problems.append(f"{d}: {exc}")
            continue
        run_id = Path(d).name
        metrics = [h for h in header if h not in ("round", "wall_ms")]
        for row in body:
            cells = dict(zip(header, row))
            for m in metrics:
                w.writerow([run_id, cells["round"], m, cells[m]])
    return buf.getvalue(), problems


GAP_VARIANTS = {
    "vit-split3": ("split3", PRESET_MODELS["vit"]),
    "cnn-bn-split3": ("split3", PRESET_MODELS["cnn-bn"]),
    "cnn-gn-split3": ("split3", PRESET_MODELS["cnn-gn"]),
    "vit-iid": ("iid", PRESET_MODELS["vit"]),
    "cnn-bn-iid": ("iid", PRESET_MODELS["cnn-bn"]),
}


def gap_study(cfg: ExperimentConfig, out: str | os.PathLike | None = None, *,
              vit_overrides: dict | None = None, cnn_overrides: dict | None = None) -> dict:
    """FedAVG runs of TinyViT and TinyCNN (BN, GN) on split3 and IID with all
    other settings from ``cfg``; writes each run plus a combined summary.json
    holding the ViT-minus-CNN gaps."""
    from .config import _OPTIMIZERS

    root = output_dir(cfg, out)
    finals = {}
    for tag, (part, model) in GAP_VARIANTS.items():
        data = cfg.to_dict()
        data["name"] = f"{cfg.name}-{tag}"
        data["partition"]["preset"] = part
        data["partition"]["class_assignment"] = None
        data["model"].update(model)
        family = "vit" if model["arch"] == "tiny-vit" else "cnn"
        fed = data["federation"]
        chosen = (vit_overrides if family == "vit" else cnn_overrides) or _OPTIMIZERS[family]
        fed.update(algorithm="fedavg", **copy.deepcopy(chosen))
        data["report"]["target"] = data["report"]["target"] if data["report"]["target"] != "auto" else 0.5
        summary = run_experiment(parse_config(data), root / tag)
        finals[tag] = summary["final_accuracy"]
    combined = {
        "final_accuracy": finals,
        "gap_split3": finals["vit-split3"] - finals["cnn-bn-split3"],
        "gap_iid": finals["vit-iid"] - finals["cnn-bn-iid"],
        "gn_minus_bn_split3": finals["cnn-gn-split3"] - finals["cnn-bn-split3"],
        "config": cfg.to_dict(),
    }
    write_json(root / "summary.json", combined)
    return combined


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def _parse_scalar(text: str):
    return yaml_load(text)


def _apply_overrides(cfg: ExperimentConfig, overrides: Sequence[str]) -> ExperimentConfig:
    for item in overrides:
        if "=" not in item:
            raise ConfigError([(item, "override must look like path=value")])
        key, text = item.split("=", 1)
        cfg = with_value(cfg, key.strip(), _parse_scalar(text))
    return cfg


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedarch", description="Federated learning experiment runner")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("config")
    r.add_argument("--output")
    r.add_argument("--set", action="append", default=[], metavar="PATH=VALUE")

    s = sub.add_parser("sweep", help="run one experiment per value of a numeric field")
    s.add_argument("config")
    s.add_argument("--axis")
    s.add_argument("--values", help="comma-separated values")
    s.add_argument("--output")
    s.add_argument("--set", action="append", default=[], metavar="PATH=VALUE")

    g = sub.add_parser("gap", help="architecture and normalization gap study (FedAVG, split3 vs IID)")
    g.add_argument("config")
    g.add_argument("--output")
    g.add_argument("--set", action="append", default=[], metavar="PATH=VALUE")

    pd = sub.add_parser("plotdata", help="merge rounds.csv files into one long-format table")
    pd.add_argument("dirs", nargs="+")
    pd.add_argument("--output", help="file to write (default: stdout)")

    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    v.add_argument("--set", action="append", default=[], metavar="PATH=VALUE")

    pr = sub.add_parser("presets", help="list preset names")
    pr.add_argument("--dump", metavar="NAME", help="print one preset as YAML")
    return p


def _report_config_error(exc: ConfigError) -> int:
    for path, msg in exc.errors:
        print(f"config error: {path}: {msg}", file=sys.stderr)
    return EXIT_CONFIG


def _report_runtime_error(exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return EXIT_RUNTIME


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG

    if args.command == "presets":
        if args.dump:
            try:
                print(dump_config(preset(args.dump)), end="")
            except ConfigError as exc:
                return _report_config_error(exc)
        else:
            print("\n".join(preset_names()))
        return EXIT_OK

    if args.command == "plotdata":
        text, problems = plotdata(args.dirs)
        for msg in problems:
            print(f"warning: {msg}", file=sys.stderr)
        if len(problems) == len(args.dirs):
            return EXIT_RUNTIME
        if args.output:
            atomic_write_bytes(args.output, text.encode())
        else:
            sys.stdout.write(text)
        return EXIT_OK

    try:
        cfg = _apply_overrides(load_config(args.config), args.set)
        if args.command == "validate":
            print("ok")
            return EXIT_OK
        if args.command == "sweep":
            axis = args.axis or cfg.sweep.axis
            if args.values is not None:
                values = [_parse_scalar(v) for v in args.values.split(",") if v.strip()]
            else:
                values = cfg.sweep.values
            if not axis or not values:
                raise ConfigError([("sweep", "give --axis and --values or a sweep section")])
            bad = [v for v in values if isinstance(v, bool) or not isinstance(v, (int, float))]
            if bad:
                raise ConfigError([("--values", f"non-numeric values {bad}")])
            index = sweep(cfg, axis, values, args.output)
            print(json.dumps(index))
            return EXIT_OK
    except ConfigError as exc:
        return _report_config_error(exc)

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("once")
            if args.command == "gap":
                summary = gap_study(cfg, args.output)
                print(json.dumps({k: summary[k] for k in ("gap_split3", "gap_iid", "gn_minus_bn_split3")}))
            else:
                summary = run_experiment(cfg, args.output)
                print(json.dumps({k: summary[k] for k in ("final_accuracy", "rounds_to_target", "transmitted_size")}))
    except ConfigError as exc:
        return _report_config_error(exc)
    except Exception as exc:  # structured message, exit 1
        return _report_runtime_error(exc)
    return EXIT_OK


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
