"""Experiment orchestration: configuration, end-to-end training runs for
every method, the lemma-verification suites, and method comparisons.

All randomness flows from a single master seed through named sub-streams, so
every output is reproducible byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from . import cost_model, scheduler, system_model, tasks
from .cost_model import AnalysisParams
from .errors import ConfigError, InfeasibleError
from .fl_engine import (
    LayeredModel,
    MlpObjective,
    QuadraticObjective,
    RoundConfig,
    aggregate_layerwise,
    run_round,
    run_unbounded_round,
)
from .system_model import ClientProfile, Schedule, named_rng, sample_layer_counts

METHODS = ("adel", "salf_fixed", "drop", "wait")

BUDGET_SLACK = 1e-9


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description (see README for the JSON schema)."""

    task: dict[str, Any]
    clients: list[dict[str, Any]] | dict[str, Any]
    rounds: int
    t_max: float
    method: str
    lr: dict[str, Any] = field(default_factory=lambda: {"kind": "inverse_decay", "eta_0": 0.1})
    local_iters: int = 1
    weight_decay: float = 0.0
    analysis: str | dict[str, Any] = "derive"
    scheduler: dict[str, Any] = field(default_factory=dict)
    m_ref: float = 4.0
    seed: int = 0
    # When set, the task, client profiles, initial model, and derived
    # analysis constants draw from this seed instead of ``seed``, so a
    # multi-seed comparison varies only the per-round simulation randomness.
    structure_seed: int | None = None

    @property
    def effective_structure_seed(self) -> int:
        return self.seed if self.structure_seed is None else self.structure_seed

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"task", "clients", "rounds", "t_max", "method"} - set(raw)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if not (self.t_max > 0.0 and math.isfinite(self.t_max)):
            raise ConfigError("t_max must be positive and finite")
        if self.local_iters < 1:
            raise ConfigError("local_iters must be >= 1")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.lr.get("kind") not in ("inverse_decay", "constant"):
            raise ConfigError("lr.kind must be 'inverse_decay' or 'constant'")
        if self.lr.get("eta_0", 0.0) <= 0.0:
            raise ConfigError("lr.eta_0 must be positive")
        kind = self.task.get("kind")
        if kind not in ("quadratic", "mlp"):
            raise ConfigError("task.kind must be 'quadratic' or 'mlp'")
        if kind == "mlp" and self.analysis == "derive":
            raise ConfigError("analysis constants must be given explicitly for mlp tasks")
        if self.m_ref <= 0.0:
            raise ConfigError("m_ref must be positive")


@dataclass
class RoundLogRecord:
    round_index: int
    deadline: float
    cumulative_time: float
    distance_sq: float | None
    accuracy: float | None
    mean_depth: float
    contributor_counts: tuple[int, ...]


CSV_COLUMNS = (
    "round",
    "deadline",
    "cumulative_time",
    "distance_sq",
    "accuracy",
    "mean_depth",
    "contributor_counts",
)


def build_clients(config: ExperimentConfig) -> list[ClientProfile]:
    """Materialize client profiles from an explicit list or a generator spec."""
    spec = config.clients
    if isinstance(spec, list):
        return [ClientProfile(**entry) for entry in spec]
    count = spec.get("count")
    if not isinstance(count, int) or count < 2:
        raise ConfigError("client generator needs an integer count >= 2")
    rate_lo, rate_hi = spec.get("compute_rate_range", (2.0, 20.0))
    comm_lo, comm_hi = spec.get("comm_time_range", (0.0, 0.0))
    rng = named_rng(config.effective_structure_seed, "clients")
    profiles = []
    for u in range(count):
        rate = float(np.exp(rng.uniform(np.log(rate_lo), np.log(rate_hi))))
        comm = float(rng.uniform(comm_lo, comm_hi))
        profiles.append(ClientProfile(id=u, compute_rate=rate, comm_time=comm))
    return profiles


def build_task(config: ExperimentConfig):
    """Construct the objective (and, for quadratic tasks, the raw task)."""
    spec = dict(config.task)
    kind = spec.pop("kind")
    if kind == "quadratic":
        num_layers = spec.pop("num_layers", 4)
        init_spread = spec.pop("init_spread", 1.0)
        rng = named_rng(config.effective_structure_seed, "task")
        task = tasks.make_quadratic_task(
            num_users=spec.pop("num_users"),
            dim=spec.pop("dim"),
            heterogeneity=spec.pop("heterogeneity", 0.0),
            rng=rng,
            samples_per_user=spec.pop("samples_per_user", None),
        )
        if spec:
            raise ConfigError(f"unknown quadratic task keys: {sorted(spec)}")
        return QuadraticObjective(task, num_layers), task, init_spread
    # mlp
    dataset = tasks.read_idx(
        spec.pop("images"), spec.pop("labels"), limit=spec.pop("limit", None)
    )
    holdout_fraction = spec.pop("holdout_fraction", 0.2)
    num_users = spec.pop("num_users")
    skew = spec.pop("skew", 0.0)
    hidden = tuple(spec.pop("hidden", (32, 16)))
    num_classes = spec.pop("num_classes", 10)
    init_spread = spec.pop("init_spread", 0.1)
    if spec:
        raise ConfigError(f"unknown mlp task keys: {sorted(spec)}")
    rng = named_rng(config.effective_structure_seed, "task")
    n_holdout = int(round(holdout_fraction * dataset.num_samples))
    perm = rng.permutation(dataset.num_samples)
    holdout_idx, train_idx = perm[:n_holdout], perm[n_holdout:]
    train = tasks.ClassificationDataset(
        samples=dataset.samples[train_idx], labels=dataset.labels[train_idx]
    )
    train.partition = tasks.partition_label_skew(train, num_users, skew, rng)
    holdout = (dataset.samples[holdout_idx], dataset.labels[holdout_idx])
    return MlpObjective(train, hidden, num_classes, holdout=holdout), None, init_spread


def lr_schedule(config: ExperimentConfig):
    eta_0 = config.lr["eta_0"]
    if config.lr["kind"] == "inverse_decay":
        return lambda t: cost_model.lr_inverse_decay(eta_0, t)
    return lambda t: cost_model.lr_constant(eta_0, t)


def build_analysis_params(
    config: ExperimentConfig,
    objective,
    task: tasks.QuadraticFederatedTask | None,
    clients: list[ClientProfile],
    init_model: LayeredModel,
) -> tuple[AnalysisParams, list[ClientProfile]]:
    """Resolve analysis constants, deriving them from quadratic tasks when
    requested; clients get their noise constants filled in from the task."""
    schedule_fn = lr_schedule(config)
    if config.analysis == "derive":
        if task is None:
            raise ConfigError("cannot derive analysis constants without a quadratic task")
        rng = named_rng(config.effective_structure_seed, "analysis")
        sigma_sq = tasks.estimate_noise_scales(task, rng)
        grad_bound_sq = tasks.estimate_grad_bound_sq(task, rng)
        diff = init_model.flat() - task.w_opt
        params = AnalysisParams(
            rho_c=task.rho_c,
            rho_s=task.rho_s,
            grad_bound_sq=grad_bound_sq,
            het_gap=task.het_gap(),
            delta_1=float(diff @ diff),
            lr_schedule=schedule_fn,
            num_layers=objective.num_layers,
            num_users=len(clients),
        )
        clients = [replace(c, noise_scale_sq=sigma_sq[c.id]) for c in clients]
        return params, clients
    raw = dict(config.analysis)
    sigma_sq = raw.pop("noise_scale_sq", None)
    params = AnalysisParams(
        lr_schedule=schedule_fn,
        num_layers=objective.num_layers,
        num_users=len(clients),
        **raw,
    )
    if sigma_sq is not None:
        clients = [replace(c, noise_scale_sq=sigma_sq[c.id]) for c in clients]
    return params, clients


def optimized_schedule(
    config: ExperimentConfig,
    clients: list[ClientProfile],
    params: AnalysisParams,
) -> tuple[Schedule, float, scheduler.OptimizationDiagnostics]:
    """Solve the deadline/batch-scale problem for the adaptive method."""
    sched_cfg = dict(config.scheduler)
    tr_kwargs = {
        k: sched_cfg.pop(k)
        for k in (
            "initial_radius",
            "grow_factor",
            "shrink_factor",
            "max_iterations",
            "grad_tolerance",
            "fd_step",
        )
        if k in sched_cfg
    }
    spec = scheduler.ScheduleSearchSpec.for_clients(
        clients,
        config.t_max,
        config.rounds,
        m_max=sched_cfg.pop("m_max", None),
        tr_params=scheduler.TrustRegionParams(**tr_kwargs),
        multistart_count=sched_cfg.pop("multistart_count", 8),
    )
    if sched_cfg:
        raise ConfigError(f"unknown scheduler keys: {sorted(sched_cfg)}")
    # The schedule depends only on the task structure, so the multistart
    # stream is keyed to the structure seed; comparisons over simulation
    # seeds then share one schedule.
    return scheduler.optimize_schedule(
        spec, clients, params, seed=config.effective_structure_seed
    )


def _metrics(objective, model: LayeredModel) -> tuple[float | None, float | None]:
    distance_sq = accuracy = None
    if isinstance(objective, QuadraticObjective):
        distance_sq = objective.distance_sq(model)
    elif isinstance(objective, MlpObjective) and objective.holdout is not None:
        accuracy = objective.accuracy(model)
    return distance_sq, accuracy


def run_experiment(
    config: ExperimentConfig,
    precomputed_schedule: tuple[Schedule, float, scheduler.OptimizationDiagnostics]
    | None = None,
) -> tuple[list[RoundLogRecord], LayeredModel, dict[str, Any]]:
    """Execute the configured method for up to ``rounds`` rounds within the
    time budget; returns the round log, the final model, and extras
    (the schedule and scheduler diagnostics for the adaptive method).

    ``precomputed_schedule`` skips the adaptive method's schedule search,
    which is deterministic in the structure seed and therefore reusable
    across simulation seeds."""
    objective, task, init_spread = build_task(config)
    clients = build_clients(config)
    init_model = objective.initial_model(
        named_rng(config.effective_structure_seed, "init"), init_spread
    )
    params, clients = build_analysis_params(config, objective, task, clients, init_model)
    extras: dict[str, Any] = {}
    num_layers = objective.num_layers
    eta_of = lr_schedule(config)

    fixed_batch = max(
        1, math.floor(config.m_ref * float(np.median([c.compute_rate for c in clients])))
    )
    uniform_deadline = config.t_max / config.rounds

    if config.method == "adel":
        if precomputed_schedule is not None:
            schedule, cost, diag = precomputed_schedule
        else:
            schedule, cost, diag = optimized_schedule(config, clients, params)
        extras["schedule"] = schedule
        extras["cost"] = cost
        extras["diagnostics"] = diag
        base_round_cfg = RoundConfig(
            eta=1.0,
            local_iters=config.local_iters,
            weight_decay=config.weight_decay,
            aggregation="layerwise",
        )
    elif config.method == "salf_fixed":
        schedule = Schedule(
            deadlines=(uniform_deadline,) * config.rounds, batch_scale=config.m_ref
        )
        base_round_cfg = RoundConfig(
            eta=1.0,
            local_iters=config.local_iters,
            weight_decay=config.weight_decay,
            aggregation="layerwise",
            batch_sizes={c.id: fixed_batch for c in clients},
        )
    elif config.method == "drop":
        schedule = Schedule(
            deadlines=(uniform_deadline,) * config.rounds, batch_scale=config.m_ref
        )
        schedule.validate(clients, config.t_max)
        base_round_cfg = RoundConfig(
            eta=1.0,
            local_iters=config.local_iters,
            weight_decay=config.weight_decay,
            aggregation="drop",
        )
    else:  # wait
        schedule = None
        base_round_cfg = RoundConfig(
            eta=1.0,
            local_iters=config.local_iters,
            weight_decay=config.weight_decay,
            aggregation="fedavg",
            batch_sizes={c.id: fixed_batch for c in clients},
        )

    if config.method in ("adel", "salf_fixed"):
        schedule.validate(clients, config.t_max)
        min_deadline = min(schedule.deadlines)
        for client in clients:
            if min_deadline <= client.comm_time:
                raise InfeasibleError(
                    f"client {client.id} cannot communicate within deadline"
                )

    model = init_model
    records: list[RoundLogRecord] = []
    cumulative = 0.0
    for t in range(1, config.rounds + 1):
        round_cfg = replace(base_round_cfg, eta=eta_of(t))
        if config.method == "wait":
            new_model, round_time = run_unbounded_round(
                objective,
                model,
                t,
                clients,
                dict(base_round_cfg.batch_sizes),
                config.seed,
                round_cfg,
            )
            if cumulative + round_time > config.t_max * (1.0 + BUDGET_SLACK):
                break
            model = new_model
            cumulative += round_time
            deadline = round_time
            mean_depth = 1.0
            counts = tuple(len(clients) for _ in range(num_layers))
        else:
            outcome = run_round(
                objective, model, schedule, t, clients, config.seed, round_cfg
            )
            model = outcome.aggregate_model
            cumulative += outcome.elapsed
            deadline = outcome.deadline
            mean_depth = float(
                np.mean([s.reached_depth for s in outcome.depth_samples])
            )
            counts = tuple(len(s) for s in outcome.contributor_sets)
        distance_sq, accuracy = _metrics(objective, model)
        records.append(
            RoundLogRecord(
                round_index=t,
                deadline=deadline,
                cumulative_time=cumulative,
                distance_sq=distance_sq,
                accuracy=accuracy,
                mean_depth=mean_depth,
                contributor_counts=counts,
            )
        )
    distance_sq, accuracy = _metrics(objective, model)
    extras["final_metric"] = distance_sq if distance_sq is not None else accuracy
    return records, model, extras


def compare_methods(
    config: ExperimentConfig, methods: list[str], seeds: list[int]
) -> list[dict[str, Any]]:
    """Mean and standard error of the final metric per method at equal
    budget, under common random numbers across methods."""
    if len(methods) < 2:
        raise ConfigError("need at least two methods to compare")
    if len(seeds) < 5:
        raise ConfigError("need at least five seeds to compare")
    rows = []
    # One schedule search per distinct structure seed; every adaptive run
    # with the same structure reuses it.
    schedule_cache: dict[int, tuple] = {}
    for method in methods:
        finals = []
        for seed in seeds:
            run_cfg = replace(config, method=method, seed=seed)
            precomputed = None
            if method == "adel":
                key = run_cfg.effective_structure_seed
                if key not in schedule_cache:
                    objective, task, init_spread = build_task(run_cfg)
                    clients = build_clients(run_cfg)
                    init_model = objective.initial_model(
                        named_rng(key, "init"), init_spread
                    )
                    params, clients = build_analysis_params(
                        run_cfg, objective, task, clients, init_model
                    )
                    schedule_cache[key] = optimized_schedule(run_cfg, clients, params)
                precomputed = schedule_cache[key]
            # A method that completes zero rounds within the budget (possible
            # for "wait") scores the untouched initial model.
            _records, _model, extras = run_experiment(
                run_cfg, precomputed_schedule=precomputed
            )
            finals.append(extras["final_metric"])
        finals_arr = np.asarray(finals)
        rows.append(
            {
                "method": method,
                "t_max": config.t_max,
                "mean_final_metric": float(finals_arr.mean()),
                "se_final_metric": float(finals_arr.std(ddof=1) / math.sqrt(len(finals))),
                "num_seeds": len(seeds),
            }
        )
    return rows
