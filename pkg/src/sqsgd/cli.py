"""Command-line driver: ``sqsgd run|sweep|validate <config.ini>``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ConfigError, RunConfig, load_config, serialize_config
from .flsim.simulator import build_pipeline, load_dataset, total_rounds, train
from .flsim.models import build_model

log = logging.getLogger("sqsgd")

OUTPUT_ROOT_ENV = "SQSGD_OUTPUT_ROOT"
METRICS_HEADER = ["round", "epoch", "train_loss", "test_acc", "U_t", "uplink_bits_per_client"]
AXES = ("quantization_bits", "epsilon", "sampling_ratio", "bits-vs-ratio")
SWEEP_HEADER = [
    "axis",
    "value",
    "levels",
    "sampling_ratio",
    "epsilon",
    "dtilde",
    "final_test_acc",
    "best_test_acc",
    "final_train_loss",
    "final_U",
    "uplink_bits_per_client",
]


def output_dir(config: RunConfig) -> Path:
    out = Path(config.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def resolve(config: RunConfig, n_train: int, features: int, classes: int) -> dict:
    """Derived quantities for a run, including the solved mechanism parameters."""
    model = build_model(config.arch, features, classes, config.hidden)
    rpe, rounds = total_rounds(config, n_train)
    out = {"model_dim": model.dim, "rounds_per_epoch": rpe, "rounds": rounds}
    if config.mode == "sqsgd":
        pipe = build_pipeline(config, model.dim)
        out.update(dtilde=pipe.dtilde, n_select=pipe.n_select, scalar_levels=pipe.k_scalar)
        if pipe.params is not None:
            out.update(pipe.params.to_dict())
            out["slack"] = pipe.params.slack
    return out


def _dataset_shape(config: RunConfig):
    if config.uses_idx:
        ds = load_dataset(config)
        return ds, len(ds.y_train), ds.features, ds.classes
    return None, config.n_train, config.features, config.classes


def write_metrics(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def run_config(config: RunConfig) -> dict:
    """Train one configuration and write its artifacts; returns the summary."""
    dataset, n_train, features, classes = _dataset_shape(config)
    resolved = resolve(config, n_train, features, classes)
    out = output_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(serialize_config(config))
    (out / "resolved.json").write_text(json.dumps({"config": config.to_dict(), "resolved": resolved}, indent=2, sort_keys=True) + "\n")

    result = train(config, dataset)
    write_metrics(out / "metrics.csv", result.metrics)
    accs = [r["test_acc"] for r in result.metrics if not math.isnan(r["test_acc"])]
    final = result.final
    summary = {
        "rounds": result.rounds,
        "rounds_per_epoch": result.rounds_per_epoch,
        "final_test_acc": final.get("test_acc"),
        "best_test_acc": max(accs) if accs else None,
        "final_train_loss": final.get("train_loss"),
        "final_U": result.bound_history[-1] if result.bound_history else None,
        "bound_monotone": all(b <= a for a, b in zip(result.bound_history, result.bound_history[1:])),
        "uplink_bits_per_client": final.get("uplink_bits_per_client"),
        "resolved": resolved,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def sweep_configs(base: RunConfig, axis: str, values) -> list[tuple[float, RunConfig]]:
    """One config per grid point; all share the base master seed."""
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}")
    out = []
    base_dir = Path(base.output_dir)
    for raw in values:
        value = float(raw)
        if axis == "quantization_bits":
            changes = {"levels": 2 ** _as_bits(value)}
        elif axis == "epsilon":
            changes = {"epsilon": value}
        elif axis == "sampling_ratio":
            changes = {"sampling_ratio": value}
        else:
            bits = _as_bits(value)
            budget = base.sampling_ratio * math.log2(base.levels)
            changes = {"levels": 2**bits, "sampling_ratio": budget / bits}
        tag = f"{axis}={raw}"
        changes["output_dir"] = str(base_dir / tag)
        out.append((value, base.replace(**changes)))
    return out


def _as_bits(value: float) -> int:
    if value != int(value) or value < 1:
        raise ConfigError(f"bit counts must be positive integers, got {value}")
    return int(value)


def _sweep_row(axis, value, config, summary):
    return {
        "axis": axis,
        "value": value,
        "levels": config.levels,
        "sampling_ratio": config.sampling_ratio,
        "epsilon": config.epsilon,
        "dtilde": summary["resolved"].get("dtilde", ""),
        "final_test_acc": summary["final_test_acc"],
        "best_test_acc": summary["best_test_acc"],
        "final_train_loss": summary["final_train_loss"],
        "final_U": summary["final_U"],
        "uplink_bits_per_client": summary["uplink_bits_per_client"],
    }


def run_sweep(base: RunConfig, axis: str, values, jobs: int = 1) -> Path:
    grid = sweep_configs(base, axis, values)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            summaries = list(pool.map(run_config, [c for _, c in grid]))
    else:
        summaries = [run_config(c) for _, c in grid]
    out = output_dir(base)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"sweep_{axis}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_HEADER, lineterminator="\n")
        writer.writeheader()
        for (value, config), summary in zip(grid, summaries):
            writer.writerow(_sweep_row(axis, value, config, summary))
    return path


def _fail(exc: Exception, code: int) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sqsgd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train one configuration")
    p_run.add_argument("config")

    p_val = sub.add_parser("validate", help="parse a config and print the resolved mechanism")
    p_val.add_argument("config")

    p_sweep = sub.add_parser("sweep", help="run one configuration per value along an axis")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--axis", required=True, choices=AXES)
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--jobs", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        if args.command == "validate":
            _, n_train, features, classes = _dataset_shape(config)
            print(json.dumps(resolve(config, n_train, features, classes), indent=2, sort_keys=True))
        elif args.command == "run":
            summary = run_config(config)
            print(json.dumps({k: v for k, v in summary.items() if k != "resolved"}, sort_keys=True))
        else:
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            print(run_sweep(config, args.axis, values, args.jobs))
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        return _fail(exc, 2)
    except (FloatingPointError, OSError) as exc:
        return _fail(exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
