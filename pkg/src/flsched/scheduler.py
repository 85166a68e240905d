"""Deadline/batch-scale optimization over the convergence-bound cost.

The constrained search (total-time budget, non-increasing deadlines,
no-contributor probability margin) is turned into an unconstrained one by a
change of variables, then minimized with a dogleg trust-region method on a
finite-difference quadratic model, with deterministic multistart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cost_model import AnalysisParams, convergence_bound, truncation_constraint_ok
from .errors import DomainError, InfeasibleError
from .system_model import ClientProfile, Schedule, named_rng, no_contributor_prob_bound

# Penalty level returned for infeasible probe points; large enough to lose
# against any feasible candidate, finite so difference quotients stay usable.
_PENALTY_BASE = 1e30


@dataclass(frozen=True)
class TrustRegionParams:
    initial_radius: float = 1.0
    grow_factor: float = 2.0
    shrink_factor: float = 0.25
    max_iterations: int = 500
    grad_tolerance: float = 1e-6
    fd_step: float = 1e-5


@dataclass(frozen=True)
class ScheduleSearchSpec:
    """Search space for the joint deadline/batch-scale problem."""

    t_max: float
    num_rounds: int
    m_bounds: tuple[float, float]
    deadline_floor: float
    tr_params: TrustRegionParams = field(default_factory=TrustRegionParams)
    multistart_count: int = 8

    def __post_init__(self) -> None:
        if self.num_rounds < 1:
            raise DomainError("num_rounds must be >= 1")
        if not (0.0 < self.deadline_floor and math.isfinite(self.deadline_floor)):
            raise DomainError("deadline_floor must be positive")
        if self.t_max < self.num_rounds * self.deadline_floor:
            raise InfeasibleError(
                f"budget {self.t_max} cannot fit {self.num_rounds} rounds of at "
                f"least {self.deadline_floor} seconds"
            )
        m_min, m_max = self.m_bounds
        if not (0.0 < m_min <= m_max):
            raise DomainError(f"bad batch-scale bounds {self.m_bounds}")

    @classmethod
    def for_clients(
        cls,
        clients: list[ClientProfile],
        t_max: float,
        num_rounds: int,
        m_max: float | None = None,
        floor_margin_frac: float = 0.01,
        **kwargs,
    ) -> "ScheduleSearchSpec":
        """Derive the deadline floor and minimal batch scale from the client
        profiles: the floor sits a small margin above the slowest link, and
        m_min makes every client's batch-rule denominator strictly positive
        at the floor deadline."""
        max_comm = max(c.comm_time for c in clients)
        floor = max_comm + floor_margin_frac * t_max / num_rounds
        if t_max < num_rounds * floor:
            raise InfeasibleError(
                f"budget {t_max} infeasible for {num_rounds} rounds above "
                f"communication floor {floor}"
            )
        # Anchor the lower batch-scale bound at the uniform deadline (the
        # baseline every run must support); anchoring it at the floor instead
        # would force m so high that the truncation constraint can become
        # unsatisfiable.  Batch feasibility at shorter deadlines is enforced
        # during the search itself.
        uniform = t_max / num_rounds
        m_min = max(
            (1.0 + 1e-3) * uniform / (c.compute_rate * (uniform - c.comm_time))
            for c in clients
        )
        if m_max is None:
            m_max = max(1000.0 * m_min, 1.0)
        if m_max < m_min:
            raise InfeasibleError(f"m_max {m_max} below required m_min {m_min}")
        return cls(
            t_max=t_max,
            num_rounds=num_rounds,
            m_bounds=(m_min, m_max),
            deadline_floor=floor,
            **kwargs,
        )


@dataclass
class OptimizationDiagnostics:
    iterations: int
    restarts: int
    final_radius: float
    objective_trace: list[float]
    baseline_cost: float


def parameterize(free_vars: np.ndarray, spec: ScheduleSearchSpec) -> Schedule:
    """Map R + 1 unconstrained reals to a feasible schedule.

    The batch scale is a logistic map into its bounds.  Deadlines are the
    floor plus tail sums of positive increments exp(g_t), so they decrease
    in t by construction and the map stays smooth everywhere; the
    above-floor part is then rescaled so the total never exceeds the budget.
    """
    free_vars = np.asarray(free_vars, dtype=np.float64)
    if free_vars.shape != (spec.num_rounds + 1,):
        raise DomainError(
            f"expected {spec.num_rounds + 1} free variables, got {free_vars.shape}"
        )
    m_min, m_max = spec.m_bounds
    g_m = float(np.clip(free_vars[-1], -60.0, 60.0))
    m = m_min + (m_max - m_min) / (1.0 + math.exp(-g_m))
    increments = np.exp(np.clip(free_vars[:-1], -60.0, 60.0))
    above_floor = np.cumsum(increments[::-1])[::-1]
    total_above = float(above_floor.sum())
    budget_above = spec.t_max - spec.num_rounds * spec.deadline_floor
    if total_above > budget_above and total_above > 0.0:
        above_floor = above_floor * (budget_above / total_above)
    deadlines = spec.deadline_floor + above_floor
    return Schedule(deadlines=tuple(deadlines), batch_scale=m)


def inverse_parameterize(schedule: Schedule, spec: ScheduleSearchSpec) -> np.ndarray:
    """Free variables that reproduce ``schedule`` (up to budget rescaling
    and flat runs, whose zero increments are clamped to a tiny positive
    value)."""
    m_min, m_max = spec.m_bounds
    frac = (schedule.batch_scale - m_min) / (m_max - m_min)
    frac = min(max(frac, 1e-9), 1.0 - 1e-9)
    g_m = math.log(frac / (1.0 - frac))
    above = np.array(schedule.deadlines) - spec.deadline_floor
    increments = np.append(above[:-1] - above[1:], above[-1])
    increments = np.maximum(increments, 1e-9 * max(spec.deadline_floor, 1.0))
    return np.concatenate([np.log(increments), [g_m]])


def numeric_gradient(objective, point: np.ndarray, step: float) -> np.ndarray:
    """Central-difference gradient estimate."""
    point = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(point)
    for i in range(point.size):
        forward = point.copy()
        backward = point.copy()
        forward[i] += step
        backward[i] -= step
        grad[i] = (objective(forward) - objective(backward)) / (2.0 * step)
    return grad


def _numeric_hessian(objective, point: np.ndarray, step: float) -> np.ndarray:
    """Symmetric finite-difference Hessian for the local quadratic model."""
    n = point.size
    hess = np.zeros((n, n))
    f0 = objective(point)
    shifts = []
    for i in range(n):
        plus = point.copy()
        minus = point.copy()
        plus[i] += step
        minus[i] -= step
        shifts.append((objective(plus), objective(minus)))
    for i in range(n):
        f_plus, f_minus = shifts[i]
        hess[i, i] = (f_plus - 2.0 * f0 + f_minus) / step ** 2
        for j in range(i + 1, n):
            pp = point.copy()
            pp[i] += step
            pp[j] += step
            f_pp = objective(pp)
            hess[i, j] = hess[j, i] = (
                f_pp - shifts[i][0] - shifts[j][0] + f0
            ) / step ** 2
    return hess


def _dogleg_step(grad: np.ndarray, hess: np.ndarray, radius: float) -> np.ndarray:
    """Classic dogleg step for the quadratic model within the radius."""
    try:
        newton = np.linalg.solve(hess, -grad)
        newton_ok = bool(grad @ hess @ grad > 0.0) and np.all(np.isfinite(newton))
    except np.linalg.LinAlgError:
        newton, newton_ok = None, False
    if newton_ok and np.linalg.norm(newton) <= radius:
        return newton
    curvature = float(grad @ hess @ grad)
    grad_norm = float(np.linalg.norm(grad))
    if curvature <= 0.0:
        return -grad / grad_norm * radius if grad_norm > 0 else np.zeros_like(grad)
    cauchy = -(grad_norm ** 2 / curvature) * grad
    cauchy_norm = float(np.linalg.norm(cauchy))
    if cauchy_norm >= radius:
        return cauchy / cauchy_norm * radius
    if not newton_ok:
        return cauchy
    # Walk from the Cauchy point toward the Newton point to the boundary.
    seg = newton - cauchy
    a = float(seg @ seg)
    b = 2.0 * float(cauchy @ seg)
    c = cauchy_norm ** 2 - radius ** 2
    tau = (-b + math.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a) if a > 0 else 0.0
    return cauchy + tau * seg


def _trust_region_minimize(
    objective, x0: np.ndarray, tr: TrustRegionParams
) -> tuple[np.ndarray, float, int, float, list[float]]:
    """Dogleg trust region on a finite-difference quadratic model.

    Returns (best point, best value, iterations, final radius, accepted
    objective trace).
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    f = objective(x)
    radius = tr.initial_radius
    trace = [f]
    iterations = 0
    stale_hessian = True
    hess = np.eye(x.size)
    for iterations in range(1, tr.max_iterations + 1):
        grad = numeric_gradient(objective, x, tr.fd_step)
        if np.linalg.norm(grad) < tr.grad_tolerance:
            break
        if stale_hessian:
            hess = _numeric_hessian(objective, x, tr.fd_step)
            if not np.all(np.isfinite(hess)):
                hess = np.eye(x.size)
            stale_hessian = False
        step = _dogleg_step(grad, hess, radius)
        predicted = -(grad @ step + 0.5 * step @ hess @ step)
        if predicted <= 0.0 or not np.all(np.isfinite(step)):
            radius *= tr.shrink_factor
            if radius < 1e-12:
                break
            continue
        f_new = objective(x + step)
        ratio = (f - f_new) / predicted
        if ratio > 0.75 and np.linalg.norm(step) > 0.9 * radius:
            radius *= tr.grow_factor
        elif ratio < 0.25:
            radius *= tr.shrink_factor
        if f_new < f:
            x = x + step
            f = f_new
            trace.append(f)
            stale_hessian = True
        if radius < 1e-12:
            break
    return x, f, iterations, radius, trace


def uniform_baseline(
    spec: ScheduleSearchSpec,
    clients: list[ClientProfile],
    params: AnalysisParams,
    grid_points: int = 64,
) -> tuple[Schedule, float]:
    """Uniform deadlines T_max / R with the batch scale line-searched on a
    log grid; the reference any optimized schedule must beat."""
    deadline = spec.t_max / spec.num_rounds
    m_min, m_max = spec.m_bounds
    grid = np.geomspace(m_min, m_max, grid_points)
    best: tuple[Schedule, float] | None = None
    for m in grid:
        schedule = Schedule(deadlines=(deadline,) * spec.num_rounds, batch_scale=float(m))
        try:
            schedule.validate(clients, spec.t_max)
            if not truncation_constraint_ok(schedule, params):
                continue
            cost = convergence_bound(schedule, clients, params)
        except InfeasibleError:
            continue
        if best is None or cost < best[1]:
            best = (schedule, cost)
    if best is None:
        raise InfeasibleError(
            "no batch scale on the grid satisfies the constraints at the "
            "uniform schedule"
        )
    return best


def optimize_schedule(
    spec: ScheduleSearchSpec,
    clients: list[ClientProfile],
    params: AnalysisParams,
    seed: int = 0,
) -> tuple[Schedule, float, OptimizationDiagnostics]:
    """Minimize the convergence bound over deadlines and batch scale.

    Multistart trust region in the transformed coordinates; the uniform
    baseline is always one of the starts, so the achieved cost can never
    exceed the baseline cost.
    """
    params.validate_lr(spec.num_rounds)
    baseline_schedule, baseline_cost = uniform_baseline(spec, clients, params)

    def objective(free_vars: np.ndarray) -> float:
        schedule = parameterize(free_vars, spec)
        try:
            schedule.validate(clients, spec.t_max)
        except InfeasibleError:
            return _PENALTY_BASE
        if not truncation_constraint_ok(schedule, params):
            # Graded penalty so probes near the boundary still rank.
            worst = max(
                5.0
                * no_contributor_prob_bound(
                    1, params.num_layers, params.num_users, schedule.batch_scale, d
                )
                for d in schedule.deadlines
            )
            return _PENALTY_BASE * (1.0 + worst)
        try:
            return convergence_bound(schedule, clients, params)
        except (InfeasibleError, DomainError):
            return _PENALTY_BASE
    rng = named_rng(seed, "schedule-multistart")
    starts = [inverse_parameterize(baseline_schedule, spec)]
    # Feasible linearly decreasing schedules give informative starts; the
    # near-uniform baseline start has vanishing deadline gradients in
    # log-increment coordinates.
    R = spec.num_rounds
    for slope in (0.1, 0.25, 0.5):
        weights = 1.0 + slope * (np.arange(R)[::-1] - (R - 1) / 2.0) / max((R - 1) / 2.0, 1.0)
        deadlines = weights / weights.sum() * spec.t_max
        if deadlines[-1] <= spec.deadline_floor:
            continue
        candidate = Schedule(
            deadlines=tuple(deadlines), batch_scale=baseline_schedule.batch_scale
        )
        if objective(inverse_parameterize(candidate, spec)) >= _PENALTY_BASE:
            continue
        starts.append(inverse_parameterize(candidate, spec))
    # Mild random decreasing schedules fill the remaining start budget.
    mean_increment = math.log(
        max(spec.t_max - R * spec.deadline_floor, 1e-9) / (2.0 * R)
    )
    while len(starts) < spec.multistart_count:
        g = rng.normal(loc=mean_increment, scale=0.5, size=R + 1)
        g[-1] = rng.normal(scale=1.0)
        starts.append(g)
    best_x = None
    best_f = math.inf
    total_iterations = 0
    final_radius = spec.tr_params.initial_radius
    trace: list[float] = []
    for start in starts:
        x, f, iters, radius, run_trace = _trust_region_minimize(
            objective, start, spec.tr_params
        )
        total_iterations += iters
        if f < best_f:
            best_x, best_f = x, f
            final_radius = radius
            trace = run_trace
    schedule = parameterize(best_x, spec)
    schedule.validate(clients, spec.t_max)
    cost = convergence_bound(schedule, clients, params)
    if cost > baseline_cost:
        # Trust region only accepts improvements from the baseline start, so
        # this can only trigger through parameterization round-off.
        schedule, cost = baseline_schedule, baseline_cost
    diagnostics = OptimizationDiagnostics(
        iterations=total_iterations,
        restarts=len(starts),
        final_radius=final_radius,
        objective_trace=trace,
        baseline_cost=baseline_cost,
    )
    return schedule, cost, diagnostics
