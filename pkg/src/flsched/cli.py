"""Command-line interface.

Subcommands: ``optimize-schedule``, ``simulate``, ``verify-lemmas``, and
``compare``.  All outputs are deterministic for a fixed seed.  Exit codes:
0 success, 2 configuration error, 3 infeasibility, 4 verification failure.
"""

from __future__ import annotations

import csv
import json
import os
import sys

import click

from . import experiment, verify
from .errors import ConfigError, InfeasibleError

EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_VERIFY_FAILED = 4


def _load_config(path: str, seed: int | None) -> experiment.ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if seed is not None:
        raw["seed"] = seed
    return experiment.ExperimentConfig.from_dict(raw)


def _write_json(path: str, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _record_row(record: experiment.RoundLogRecord) -> dict:
    return {
        "round": record.round_index,
        "deadline": repr(record.deadline),
        "cumulative_time": repr(record.cumulative_time),
        "distance_sq": "" if record.distance_sq is None else repr(record.distance_sq),
        "accuracy": "" if record.accuracy is None else repr(record.accuracy),
        "mean_depth": repr(record.mean_depth),
        "contributor_counts": "|".join(str(c) for c in record.contributor_counts),
    }


def _write_rounds(out_dir: str, records, fmt: str) -> str:
    rows = [_record_row(r) for r in records]
    if fmt == "json":
        path = os.path.join(out_dir, "rounds.json")
        _write_json(path, rows)
        return path
    path = os.path.join(out_dir, "rounds.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=experiment.CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return path


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
def main() -> None:
    """Straggler-aware federated learning simulator with optimized
    per-round deadlines and batch scaling."""


@main.command("optimize-schedule")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", default=".", show_default=True, help="Output directory.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
def optimize_schedule_cmd(config_path: str, out_dir: str, seed: int | None) -> None:
    """Solve the joint deadline/batch-scale problem and write schedule.json."""
    try:
        config = _load_config(config_path, seed)
        objective, task, init_spread = experiment.build_task(config)
        clients = experiment.build_clients(config)
        init_model = objective.initial_model(
            experiment.named_rng(config.effective_structure_seed, "init"), init_spread
        )
        params, clients = experiment.build_analysis_params(
            config, objective, task, clients, init_model
        )
        schedule, cost, diag = experiment.optimized_schedule(config, clients, params)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except InfeasibleError as exc:
        _fail(EXIT_INFEASIBLE, str(exc))
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "schedule.json")
    _write_json(
        path,
        {
            "deadlines": list(schedule.deadlines),
            "m": schedule.batch_scale,
            "cost": cost,
            "baseline_cost": diag.baseline_cost,
            "iterations": diag.iterations,
            "restarts": diag.restarts,
        },
    )
    click.echo(f"wrote {path}")


@main.command("simulate")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", default=".", show_default=True, help="Output directory.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv", show_default=True)
def simulate_cmd(config_path: str, out_dir: str, seed: int | None, fmt: str) -> None:
    """Run the configured method end to end and write the round log."""
    try:
        config = _load_config(config_path, seed)
        records, _model, extras = experiment.run_experiment(config)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except InfeasibleError as exc:
        _fail(EXIT_INFEASIBLE, str(exc))
    os.makedirs(out_dir, exist_ok=True)
    path = _write_rounds(out_dir, records, fmt)
    if "schedule" in extras:
        schedule, diag = extras["schedule"], extras["diagnostics"]
        _write_json(
            os.path.join(out_dir, "schedule.json"),
            {
                "deadlines": list(schedule.deadlines),
                "m": schedule.batch_scale,
                "cost": extras["cost"],
                "baseline_cost": diag.baseline_cost,
                "iterations": diag.iterations,
                "restarts": diag.restarts,
            },
        )
    click.echo(f"wrote {path}")


@main.command("verify-lemmas")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False), required=False)
@click.option("--trials", type=int, default=100_000, show_default=True)
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", "out_dir", default=".", show_default=True, help="Output directory.")
def verify_lemmas_cmd(config_path: str | None, trials: int, seed: int | None, out_dir: str) -> None:
    """Run the verification suites and write verify.json."""
    try:
        if trials < 10_000:
            raise ConfigError("trials must be at least 10000")
        base_seed = 0
        if config_path is not None:
            config = _load_config(config_path, seed)
            base_seed = config.seed
        elif seed is not None:
            base_seed = seed
        report = verify.verify_lemmas(trials=trials, seed=base_seed)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "verify.json")
    _write_json(path, report)
    for suite in report["suites"]:
        click.echo(f"{suite['name']}: {suite['status']}")
    if not report["all_passed"]:
        _fail(EXIT_VERIFY_FAILED, "one or more verification suites failed")
    click.echo(f"wrote {path}")


@main.command("compare")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seeds", "seeds_csv", default=None, help="Comma-separated seed list.")
@click.option(
    "--methods",
    "methods_csv",
    default="adel,salf_fixed,drop,wait",
    show_default=True,
    help="Comma-separated method list.",
)
@click.option("--out", "out_dir", default=".", show_default=True, help="Output directory.")
def compare_cmd(config_path: str, seeds_csv: str | None, methods_csv: str, out_dir: str) -> None:
    """Compare methods over multiple seeds at equal budget; write compare.csv."""
    try:
        config = _load_config(config_path, None)
        if seeds_csv is None:
            seeds = [config.seed + i for i in range(5)]
        else:
            seeds = [int(s) for s in seeds_csv.split(",") if s.strip()]
        methods = [m.strip() for m in methods_csv.split(",") if m.strip()]
        rows = experiment.compare_methods(config, methods, seeds)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except InfeasibleError as exc:
        _fail(EXIT_INFEASIBLE, str(exc))
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "compare.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=["method", "t_max", "mean_final_metric", "se_final_metric", "num_seeds"],
        )
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {
                    "method": row["method"],
                    "t_max": repr(row["t_max"]),
                    "mean_final_metric": repr(row["mean_final_metric"]),
                    "se_final_metric": repr(row["se_final_metric"]),
                    "num_seeds": row["num_seeds"],
                }
            )
    click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
