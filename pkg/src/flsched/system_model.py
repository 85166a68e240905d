"""Stochastic heterogeneity model for deadline-limited clients.

Each client backpropagates through an effectively unbounded stack of layers,
one exponential service time per layer with mean ``batch / compute_rate``,
until its effective deadline ``T - comm_time`` expires.  The number of
completed layers is then Poisson distributed, which gives a closed form for
the probability that a layer receives no contribution at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DeadlineTooShortError, DomainError, InfeasibleBatchError, InfeasibleError
from .gamma_math import poisson_cdf, regularized_upper_gamma

_REL_SLACK = 1e-9


@dataclass(frozen=True)
class ClientProfile:
    """Static per-client capabilities.

    compute_rate is in layers*samples per second, comm_time in seconds, and
    noise_scale_sq is the gradient-variance constant (variance of a batch
    gradient is bounded by noise_scale_sq / batch_size).
    """

    id: int
    compute_rate: float
    comm_time: float = 0.0
    noise_scale_sq: float = 0.0

    def __post_init__(self) -> None:
        if not (self.compute_rate > 0.0 and math.isfinite(self.compute_rate)):
            raise DomainError(f"compute_rate must be positive, got {self.compute_rate!r}")
        if not (self.comm_time >= 0.0 and math.isfinite(self.comm_time)):
            raise DomainError(f"comm_time must be nonnegative, got {self.comm_time!r}")
        if not (self.noise_scale_sq >= 0.0 and math.isfinite(self.noise_scale_sq)):
            raise DomainError(f"noise_scale_sq must be nonnegative, got {self.noise_scale_sq!r}")


@dataclass(frozen=True)
class Schedule:
    """Per-round deadlines plus the global batch-scaling parameter."""

    deadlines: tuple[float, ...]
    batch_scale: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "deadlines", tuple(float(d) for d in self.deadlines))
        if not self.deadlines:
            raise DomainError("schedule needs at least one round")
        if any(not (d > 0.0 and math.isfinite(d)) for d in self.deadlines):
            raise DomainError("all deadlines must be positive and finite")
        if not (self.batch_scale > 0.0 and math.isfinite(self.batch_scale)):
            raise DomainError(f"batch_scale must be positive, got {self.batch_scale!r}")
        for earlier, later in zip(self.deadlines, self.deadlines[1:]):
            if later > earlier * (1.0 + _REL_SLACK):
                raise DomainError("deadlines must be non-increasing across rounds")

    @property
    def num_rounds(self) -> int:
        return len(self.deadlines)

    @property
    def total_time(self) -> float:
        return float(sum(self.deadlines))

    def validate(self, clients: list[ClientProfile], t_max: float | None = None) -> None:
        """Check the budget and per-client feasibility invariants."""
        if t_max is not None and self.total_time > t_max * (1.0 + _REL_SLACK):
            raise InfeasibleError(
                f"total deadline time {self.total_time} exceeds budget {t_max}"
            )
        min_deadline = min(self.deadlines)
        for client in clients:
            if min_deadline <= client.comm_time:
                raise DeadlineTooShortError(
                    f"deadline {min_deadline} does not exceed comm_time "
                    f"{client.comm_time} of client {client.id}"
                )
            batch_size(self.batch_scale, client, min_deadline)


@dataclass(frozen=True)
class DepthSample:
    """Outcome of one client's deadline-limited backpropagation pass.

    layers_completed counts completed layers in the unbounded-stack sense
    (may exceed the real depth); reached_depth is the index of the deepest
    layer actually updated, with L + 1 meaning no contribution.
    """

    client_id: int
    layers_completed: int
    reached_depth: int
    layer_finish_times: tuple[float, ...] = field(default=())


def batch_size(m: float, client: ClientProfile, deadline: float) -> int:
    """Batch size floor(m * P_u * (T - B_u) / T) for one client and round."""
    if not (m > 0.0 and math.isfinite(m)):
        raise DomainError(f"batch scale must be positive, got {m!r}")
    if deadline <= client.comm_time:
        raise DeadlineTooShortError(
            f"deadline {deadline} must exceed comm_time {client.comm_time}"
        )
    raw = m * client.compute_rate * (deadline - client.comm_time) / deadline
    size = math.floor(raw)
    if size < 1:
        raise InfeasibleBatchError(
            f"batch rule gives {raw:.6g} < 1 for client {client.id} "
            f"(m={m}, deadline={deadline})"
        )
    return size


def poisson_rate(m: float, client: ClientProfile, deadline: float) -> float:
    """Rate of the Poisson layer count: (P_u / S) * (T - B_u)."""
    size = batch_size(m, client, deadline)
    return client.compute_rate / size * (deadline - client.comm_time)


def sample_depth(
    client: ClientProfile,
    deadline: float,
    batch: int,
    num_layers: int,
    rng: np.random.Generator,
) -> DepthSample:
    """Draw one deadline-limited backpropagation trace.

    Layer durations are i.i.d. exponential with mean ``batch / compute_rate``;
    the count of completed layers is unbounded, finish times are truncated at
    ``num_layers``.
    """
    if batch < 1:
        raise DomainError(f"batch must be >= 1, got {batch}")
    if num_layers < 1:
        raise DomainError(f"num_layers must be >= 1, got {num_layers}")
    if deadline <= client.comm_time:
        raise DeadlineTooShortError(
            f"deadline {deadline} must exceed comm_time {client.comm_time}"
        )
    budget = deadline - client.comm_time
    mean = batch / client.compute_rate
    completed = 0
    elapsed = 0.0
    finish_times: list[float] = []
    # Unit-rate draws scaled by the mean keep the underlying stream identical
    # across methods that share a (client, round) stream.
    while True:
        chunk = rng.exponential(size=64) * mean
        for duration in chunk:
            elapsed += duration
            if elapsed > budget:
                depth = max(num_layers + 1 - completed, 1)
                return DepthSample(
                    client_id=client.id,
                    layers_completed=completed,
                    reached_depth=depth,
                    layer_finish_times=tuple(finish_times),
                )
            completed += 1
            if completed <= num_layers:
                finish_times.append(elapsed)


def sample_layer_counts(
    client: ClientProfile,
    deadline: float,
    batch: int,
    n_rounds: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Vectorized layer counts for ``n_rounds`` independent rounds.

    Same generative process as :func:`sample_depth` (cumulative exponential
    service times against the effective deadline), drawn in bulk for
    Monte Carlo suites.
    """
    if batch < 1:
        raise DomainError(f"batch must be >= 1, got {batch}")
    if deadline <= client.comm_time:
        raise DeadlineTooShortError(
            f"deadline {deadline} must exceed comm_time {client.comm_time}"
        )
    budget = deadline - client.comm_time
    mean = batch / client.compute_rate
    lam = budget / mean
    counts = np.zeros(n_rounds, dtype=np.int64)
    remaining = np.full(n_rounds, budget)
    active = np.arange(n_rounds)
    # Chunk well past the mean so almost all rounds finish in one pass.
    chunk = max(16, int(lam + 10.0 * math.sqrt(lam) + 10.0))
    while active.size:
        draws = rng.exponential(scale=mean, size=(active.size, chunk))
        cum = np.cumsum(draws, axis=1)
        done = cum > remaining[active, None]
        n_completed = np.argmax(done, axis=1)
        exhausted = ~done.any(axis=1)
        counts[active] += np.where(exhausted, chunk, n_completed)
        still = active[exhausted]
        if still.size:
            remaining[still] -= cum[exhausted, -1]
        active = still
    return counts


def exact_no_contributor_prob(
    l: int,
    num_layers: int,
    clients: list[ClientProfile],
    m: float,
    deadline: float,
) -> float:
    """Exact probability that no client reaches layer ``l``.

    Product over clients of the Poisson CDF at ``num_layers - l`` with the
    per-client rate from :func:`poisson_rate`.
    """
    if not 1 <= l <= num_layers:
        raise DomainError(f"layer index {l} outside [1, {num_layers}]")
    prob = 1.0
    for client in clients:
        lam = poisson_rate(m, client, deadline)
        prob *= poisson_cdf(num_layers - l, lam)
    return prob


def no_contributor_prob_bound(
    l: int,
    num_layers: int,
    num_users: int,
    m: float,
    deadline: float,
) -> float:
    """Client-independent upper bound Q(L + 1 - l, T/m)^U on the
    no-contributor probability; monotone decreasing in ``l``."""
    if not 1 <= l <= num_layers:
        raise DomainError(f"layer index {l} outside [1, {num_layers}]")
    if num_users < 1:
        raise DomainError(f"num_users must be >= 1, got {num_users}")
    q = regularized_upper_gamma(num_layers + 1 - l, deadline / m)
    return q ** num_users


def client_round_rng(master_seed: int, round_index: int, client_id: int) -> np.random.Generator:
    """Counter-style per-(client, round) stream derived from the master seed.

    The stream identity depends only on the three indices, never on the order
    in which streams are created.
    """
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(round_index, client_id))
    return np.random.default_rng(seq)


def named_rng(master_seed: int, *labels: int | str) -> np.random.Generator:
    """Deterministic named sub-stream of the master seed."""
    key = tuple(
        label if isinstance(label, int) else int.from_bytes(str(label).encode(), "big")
        for label in labels
    )
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=key)
    return np.random.default_rng(seq)
