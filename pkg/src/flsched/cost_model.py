"""Convergence-bound cost used as the scheduler objective.

The R-round bound decomposes into a contraction of the initial error plus a
weighted sum of two per-round variance terms: a stochastic-gradient term
(finite batches and data heterogeneity) and a truncation term (layers that
may receive no update under the deadline).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

from .errors import DomainError, InfeasibleError, TruncationConstraintError
from .system_model import ClientProfile, Schedule, no_contributor_prob_bound

# Strictness margin for the no-contributor constraint 5 * Q^U < 1.
TRUNCATION_MARGIN = 1e-6


def lr_inverse_decay(eta_0: float, t: int) -> float:
    """Inverse-decay learning rate eta_0 / (1 + t) for round ``t >= 1``."""
    if not (eta_0 > 0.0 and math.isfinite(eta_0)):
        raise DomainError(f"eta_0 must be positive, got {eta_0!r}")
    if t < 1:
        raise DomainError(f"round index must be >= 1, got {t}")
    return eta_0 / (1.0 + t)


def lr_constant(eta_0: float, t: int) -> float:
    """Constant learning rate (the robustness-study variant)."""
    if not (eta_0 > 0.0 and math.isfinite(eta_0)):
        raise DomainError(f"eta_0 must be positive, got {eta_0!r}")
    if t < 1:
        raise DomainError(f"round index must be >= 1, got {t}")
    return eta_0


@dataclass(frozen=True)
class AnalysisParams:
    """Analysis constants feeding the convergence-bound cost.

    lr_schedule maps a 1-based round index to the learning rate and must be
    non-increasing with eta_t <= 2 * eta_{t+1} and eta_1 <= 1 / (4 rho_s).
    """

    rho_c: float
    rho_s: float
    grad_bound_sq: float
    het_gap: float
    delta_1: float
    lr_schedule: Callable[[int], float]
    num_layers: int
    num_users: int

    def __post_init__(self) -> None:
        if not (0.0 < self.rho_c <= self.rho_s):
            raise DomainError(
                f"need 0 < rho_c <= rho_s, got rho_c={self.rho_c}, rho_s={self.rho_s}"
            )
        if self.grad_bound_sq < 0.0 or self.het_gap < 0.0 or self.delta_1 < 0.0:
            raise DomainError("grad_bound_sq, het_gap, delta_1 must be nonnegative")
        if self.num_users < 2:
            raise DomainError("num_users must be >= 2 (U/(U-1) factor)")
        if self.num_layers < 1:
            raise DomainError("num_layers must be >= 1")

    def validate_lr(self, num_rounds: int) -> None:
        """Check the step-size preconditions over ``num_rounds`` rounds."""
        prev = None
        for t in range(1, num_rounds + 1):
            eta = self.lr_schedule(t)
            if not (eta > 0.0 and math.isfinite(eta)):
                raise DomainError(f"learning rate at round {t} must be positive")
            if t == 1 and eta > 1.0 / (4.0 * self.rho_s) + 1e-12:
                raise DomainError(
                    f"eta_1={eta} exceeds 1/(4 rho_s)={1.0 / (4.0 * self.rho_s)}"
                )
            if prev is not None and (eta > prev * (1 + 1e-12) or prev > 2.0 * eta * (1 + 1e-12)):
                raise DomainError(
                    "learning rate must be non-increasing with eta_t <= 2 eta_{t+1}"
                )
            prev = eta


def term_B(
    t: int,
    schedule: Schedule,
    clients: list[ClientProfile],
    params: AnalysisParams,
) -> float:
    """Stochastic-gradient variance term for round ``t`` (1-based)."""
    deadline = schedule.deadlines[t - 1]
    m = schedule.batch_scale
    num_users = len(clients)
    total = 0.0
    for client in clients:
        denom = m * client.compute_rate * (deadline - client.comm_time) / deadline - 1.0
        if denom <= 0.0:
            raise InfeasibleError(
                f"batch denominator {denom:.6g} <= 0 for client {client.id} "
                f"at round {t}"
            )
        total += client.noise_scale_sq / denom
    return total / num_users ** 2 + 6.0 * params.rho_s * params.het_gap


def term_C(t: int, schedule: Schedule, params: AnalysisParams) -> float:
    """Truncation variance term for round ``t`` (1-based)."""
    deadline = schedule.deadlines[t - 1]
    m = schedule.batch_scale
    num_users = params.num_users
    total = 0.0
    for l in range(1, params.num_layers + 1):
        q_pow = no_contributor_prob_bound(l, params.num_layers, num_users, m, deadline)
        denom = 1.0 - 5.0 * q_pow
        if denom <= 0.0:
            raise TruncationConstraintError(
                f"5 * Q^U = {5.0 * q_pow:.6g} >= 1 at round {t}, layer {l}"
            )
        total += (1.0 + q_pow) / denom
    return params.grad_bound_sq * 4.0 * num_users / (num_users - 1.0) * total


def truncation_constraint_ok(
    schedule: Schedule, params: AnalysisParams, margin: float = TRUNCATION_MARGIN
) -> bool:
    """True when 5 * Q(L, T_t/m)^U <= 1 - margin for every round.

    The layer-1 term dominates, so only l = 1 needs checking.
    """
    for deadline in schedule.deadlines:
        q_pow = no_contributor_prob_bound(
            1, params.num_layers, params.num_users, schedule.batch_scale, deadline
        )
        if 5.0 * q_pow > 1.0 - margin:
            return False
    return True


def het_gap_quadratic(task) -> float:
    """Heterogeneity gap of a quadratic federated task: global loss at the
    shared optimum minus the average of the per-user minima (always >= 0,
    zero iff all users share a minimizer)."""
    return task.het_gap()


def convergence_bound(
    schedule: Schedule,
    clients: list[ClientProfile],
    params: AnalysisParams,
) -> float:
    """Full R-round upper bound on the expected squared distance to the
    optimum: contraction of the initial error plus discounted variance terms.
    """
    num_rounds = schedule.num_rounds
    etas = [params.lr_schedule(t) for t in range(1, num_rounds + 1)]
    for t, eta in enumerate(etas, start=1):
        if eta * params.rho_c >= 1.0:
            raise DomainError(f"eta_t * rho_c >= 1 at round {t}")
    contraction = 1.0
    for eta in etas:
        contraction *= 1.0 - eta * params.rho_c
    total = contraction * params.delta_1
    for t in range(1, num_rounds + 1):
        eta = etas[t - 1]
        per_round = eta ** 2 * (
            term_B(t, schedule, clients, params) + term_C(t, schedule, params)
        )
        discount = 1.0
        for tau in range(t + 1, num_rounds + 1):
            discount *= 1.0 - etas[tau - 1] * params.rho_c
        total += per_round * discount
    return total
