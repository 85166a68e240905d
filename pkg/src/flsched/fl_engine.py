"""Federated training core: layered models, depth-truncated local SGD, and
the three aggregation rules (full-participation mean, drop-stragglers mean,
and bias-corrected layer-wise).

Layers are indexed 1..L from the input side; backpropagation completes the
output-side layers first, so a client that finishes z layers has updated
layers ``max(L + 1 - z, 1) .. L``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, FlschedError
from .system_model import (
    ClientProfile,
    DepthSample,
    Schedule,
    batch_size,
    client_round_rng,
    no_contributor_prob_bound,
    poisson_cdf,
    sample_depth,
)
from .tasks import ClassificationDataset, QuadraticFederatedTask


@dataclass
class LayeredModel:
    """Ordered list of per-layer parameter vectors."""

    layers: list[np.ndarray]

    def __post_init__(self) -> None:
        if not self.layers:
            raise DomainError("model needs at least one layer")
        self.layers = [np.asarray(layer, dtype=np.float64) for layer in self.layers]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return tuple(layer.size for layer in self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([layer.ravel() for layer in self.layers])

    def copy(self) -> "LayeredModel":
        return LayeredModel([layer.copy() for layer in self.layers])

    @classmethod
    def from_flat(cls, vec: np.ndarray, dims: tuple[int, ...]) -> "LayeredModel":
        if vec.size != sum(dims):
            raise DomainError(f"vector of size {vec.size} cannot fill dims {dims}")
        out, offset = [], 0
        for d in dims:
            out.append(vec[offset : offset + d].copy())
            offset += d
        return cls(out)


@dataclass(frozen=True)
class PartialUpdate:
    """One client's updated parameters for layers >= reached_depth only."""

    client_id: int
    reached_depth: int
    layer_params: tuple[np.ndarray, ...]

    def layer(self, l: int) -> np.ndarray:
        """Updated parameters for 1-based layer ``l`` (must be computed)."""
        if l < self.reached_depth:
            raise DomainError(f"layer {l} below reached depth {self.reached_depth}")
        return self.layer_params[l - self.reached_depth]


@dataclass
class RoundOutcome:
    round_index: int
    deadline: float
    contributor_sets: list[tuple[int, ...]]
    depth_samples: list[DepthSample]
    aggregate_model: LayeredModel
    elapsed: float


class QuadraticObjective:
    """A quadratic federated task viewed as an L-segment layered model.

    Segments of the parameter vector act as layers for truncation purposes;
    the gradient of every segment is exact, so gradients for layers
    ``depth..L`` are just slices of the full batch gradient.
    """

    def __init__(self, task: QuadraticFederatedTask, num_layers: int):
        if not 1 <= num_layers <= task.dim:
            raise DomainError(f"num_layers must be in [1, {task.dim}]")
        self.task = task
        self.num_layers = num_layers
        base = task.dim // num_layers
        extra = task.dim % num_layers
        self._dims = tuple(base + (1 if i < extra else 0) for i in range(num_layers))

    @property
    def num_users(self) -> int:
        return self.task.num_users

    def data_size(self, u: int) -> int:
        return self.task.data_size(u)

    def initial_model(self, rng: np.random.Generator, spread: float = 1.0) -> LayeredModel:
        w = self.task.w_opt + spread * rng.normal(size=self.task.dim)
        return LayeredModel.from_flat(w, self._dims)

    def gradient(
        self, model: LayeredModel, u: int, idx: np.ndarray, depth: int
    ) -> list[np.ndarray]:
        """Batch-mean gradients for layers ``depth..L``."""
        w = model.flat()
        grad = self.task.user_gradient(w, u, idx)
        pieces = LayeredModel.from_flat(grad, self._dims)
        return [pieces.layers[l] for l in range(depth - 1, self.num_layers)]

    def distance_sq(self, model: LayeredModel) -> float:
        diff = model.flat() - self.task.w_opt
        return float(diff @ diff)


class MlpObjective:
    """Fully connected classifier with softmax cross-entropy.

    Each weight-and-bias pair is one layer of the layered model.  Depth
    truncation stops the backward pass once the requested input-side layer's
    gradient has been produced.
    """

    def __init__(
        self,
        dataset: ClassificationDataset,
        hidden: tuple[int, ...],
        num_classes: int,
        holdout: tuple[np.ndarray, np.ndarray] | None = None,
    ):
        if dataset.partition is None:
            raise DomainError("dataset must carry a per-user partition")
        self.dataset = dataset
        self.num_classes = num_classes
        n_features = dataset.samples.shape[1]
        self.shapes: list[tuple[tuple[int, int], int]] = []
        sizes = (n_features,) + tuple(hidden) + (num_classes,)
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            self.shapes.append(((fan_in, fan_out), fan_out))
        self.num_layers = len(self.shapes)
        self.holdout = holdout

    @property
    def num_users(self) -> int:
        return len(self.dataset.partition)

    def data_size(self, u: int) -> int:
        return len(self.dataset.partition[u])

    def initial_model(self, rng: np.random.Generator, spread: float = 0.1) -> LayeredModel:
        layers = []
        for (w_shape, b_size) in self.shapes:
            scale = spread / math.sqrt(w_shape[0])
            w = rng.normal(scale=scale, size=w_shape)
            b = np.zeros(b_size)
            layers.append(np.concatenate([w.ravel(), b]))
        return LayeredModel(layers)

    def _unpack(self, layer_vec: np.ndarray, l: int) -> tuple[np.ndarray, np.ndarray]:
        (w_shape, b_size) = self.shapes[l]
        w = layer_vec[: w_shape[0] * w_shape[1]].reshape(w_shape)
        b = layer_vec[w_shape[0] * w_shape[1] :]
        return w, b

    def _forward(self, model: LayeredModel, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        activations = [x]
        h = x
        for l in range(self.num_layers):
            w, b = self._unpack(model.layers[l], l)
            z = h @ w + b
            h = z if l == self.num_layers - 1 else np.maximum(z, 0.0)
            activations.append(h)
        logits = activations[-1]
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        return activations, probs

    def loss(self, model: LayeredModel, x: np.ndarray, y: np.ndarray) -> float:
        _, probs = self._forward(model, x)
        picked = probs[np.arange(len(y)), y]
        return float(-np.mean(np.log(np.clip(picked, 1e-300, None))))

    def gradient(
        self, model: LayeredModel, u: int, idx: np.ndarray, depth: int
    ) -> list[np.ndarray]:
        """Batch-mean gradients for layers ``depth..L`` via truncated backprop."""
        part = self.dataset.partition[u]
        x = self.dataset.samples[part[idx]]
        y = self.dataset.labels[part[idx]]
        activations, probs = self._forward(model, x)
        n = x.shape[0]
        onehot = np.zeros_like(probs)
        onehot[np.arange(n), y] = 1.0
        delta = (probs - onehot) / n
        grads: list[np.ndarray | None] = [None] * self.num_layers
        for l in range(self.num_layers - 1, depth - 2, -1):
            w, _ = self._unpack(model.layers[l], l)
            grad_w = activations[l].T @ delta
            grad_b = delta.sum(axis=0)
            grads[l] = np.concatenate([grad_w.ravel(), grad_b])
            if l > 0:
                delta = delta @ w.T
                delta[activations[l] <= 0.0] = 0.0
        return [grads[l] for l in range(depth - 1, self.num_layers)]

    def accuracy(self, model: LayeredModel) -> float:
        if self.holdout is None:
            raise DomainError("no holdout split configured")
        x, y = self.holdout
        _, probs = self._forward(model, x)
        return float(np.mean(probs.argmax(axis=1) == y))


def local_sgd_update(
    objective,
    model: LayeredModel,
    u: int,
    batches: list[np.ndarray],
    eta: float,
    depth: int,
    weight_decay: float = 0.0,
) -> PartialUpdate:
    """Depth-truncated local SGD: for each batch in ``batches`` take one step
    on layers >= depth; layers below the reached depth are untouched and
    omitted from the result.
    """
    num_layers = model.num_layers
    if not 1 <= depth <= num_layers + 1:
        raise DomainError(f"depth must be in [1, {num_layers + 1}], got {depth}")
    if not batches:
        raise DomainError("need at least one local batch")
    if any(len(b) == 0 for b in batches):
        raise FlschedError(f"empty batch for client {u}")
    if depth == num_layers + 1:
        return PartialUpdate(client_id=u, reached_depth=depth, layer_params=())
    work = model.copy()
    for idx in batches:
        grads = objective.gradient(work, u, idx, depth)
        for offset, grad in enumerate(grads):
            l = depth - 1 + offset
            layer = work.layers[l]
            work.layers[l] = layer - eta * (grad + weight_decay * layer)
    return PartialUpdate(
        client_id=u,
        reached_depth=depth,
        layer_params=tuple(work.layers[depth - 1 :]),
    )


def aggregate_fedavg(updates: list[PartialUpdate], prev: LayeredModel) -> LayeredModel:
    """Arithmetic mean of fully participating client models."""
    if any(update.reached_depth != 1 for update in updates):
        missing = [u.client_id for u in updates if u.reached_depth != 1]
        raise FlschedError(f"partial updates from clients {missing} in full aggregation")
    if not updates:
        raise FlschedError("no updates to aggregate")
    layers = []
    for l in range(1, prev.num_layers + 1):
        layers.append(np.mean([update.layer(l) for update in updates], axis=0))
    return LayeredModel(layers)


def aggregate_drop(updates: list[PartialUpdate], prev: LayeredModel) -> LayeredModel:
    """Mean over clients that completed every layer; previous model if none did."""
    complete = [update for update in updates if update.reached_depth == 1]
    if not complete:
        return prev.copy()
    return aggregate_fedavg(complete, prev)


def aggregate_layerwise(
    updates: list[PartialUpdate],
    prev: LayeredModel,
    p: list[float],
) -> LayeredModel:
    """Bias-corrected per-layer aggregation.

    For each layer: keep the previous parameters when nobody contributed,
    otherwise rescale the contributor mean by 1/(1 - p_l) after subtracting
    the p_l-weighted previous layer.  With p = 0 and full participation this
    reduces to the plain mean.
    """
    if len(p) != prev.num_layers:
        raise DomainError(f"need one probability per layer, got {len(p)}")
    if any(not 0.0 <= p_l < 1.0 for p_l in p):
        raise DomainError(f"bias-correction probabilities must be in [0, 1): {p}")
    layers = []
    for l in range(1, prev.num_layers + 1):
        contributors = [u for u in updates if u.reached_depth <= l]
        if not contributors:
            layers.append(prev.layers[l - 1].copy())
            continue
        mean = np.mean([u.layer(l) for u in contributors], axis=0)
        p_l = p[l - 1]
        layers.append((mean - p_l * prev.layers[l - 1]) / (1.0 - p_l))
    return LayeredModel(layers)


@dataclass
class RoundConfig:
    """Per-round execution knobs (shared across rounds in practice)."""

    eta: float
    local_iters: int = 1
    weight_decay: float = 0.0
    aggregation: str = "layerwise"  # layerwise | drop | fedavg
    use_bound_correction: bool = False
    batch_sizes: dict[int, int] | None = None  # override the scaling rule
    forced_depths: dict[int, int] | None = None  # test hook
    forced_p: list[float] | None = None  # test hook


def no_contributor_probs(
    clients: list[ClientProfile],
    batches: dict[int, int],
    deadline: float,
    num_layers: int,
) -> list[float]:
    """Exact per-layer no-contributor probabilities from the actual
    per-client Poisson rates implied by the batch sizes in play."""
    rates = [
        c.compute_rate / batches[c.id] * (deadline - c.comm_time) for c in clients
    ]
    probs = []
    for l in range(1, num_layers + 1):
        prob = 1.0
        for lam in rates:
            prob *= poisson_cdf(num_layers - l, lam)
        probs.append(prob)
    return probs


def run_round(
    objective,
    model: LayeredModel,
    schedule: Schedule,
    t: int,
    clients: list[ClientProfile],
    master_seed: int,
    cfg: RoundConfig,
) -> RoundOutcome:
    """Execute one synchronous round: sample deadline-limited depths, run
    depth-truncated local SGD, aggregate with the configured rule.

    The wall-clock charge is the full deadline regardless of early
    finishers.  All randomness flows through per-(client, round) streams.
    """
    num_layers = model.num_layers
    deadline = schedule.deadlines[t - 1]
    m = schedule.batch_scale
    batches_per_client: dict[int, int] = {}
    depth_samples: list[DepthSample] = []
    updates: list[PartialUpdate] = []
    for client in clients:
        if cfg.batch_sizes is not None:
            size = cfg.batch_sizes[client.id]
        else:
            size = batch_size(m, client, deadline)
        batches_per_client[client.id] = size
        rng = client_round_rng(master_seed, t, client.id)
        if cfg.forced_depths is not None:
            z = cfg.forced_depths[client.id]
            sample = DepthSample(
                client_id=client.id,
                layers_completed=z,
                reached_depth=max(num_layers + 1 - z, 1),
            )
        else:
            sample = sample_depth(client, deadline, size, num_layers, rng)
        depth_samples.append(sample)
        batch_draws = [
            rng.integers(0, objective.data_size(client.id), size=size)
            for _ in range(cfg.local_iters)
        ]
        updates.append(
            local_sgd_update(
                objective,
                model,
                client.id,
                batch_draws,
                cfg.eta,
                sample.reached_depth,
                weight_decay=cfg.weight_decay,
            )
        )
    contributor_sets = [
        tuple(s.client_id for s in depth_samples if s.reached_depth <= l)
        for l in range(1, num_layers + 1)
    ]
    if cfg.aggregation == "fedavg":
        aggregate = aggregate_fedavg(updates, model)
    elif cfg.aggregation == "drop":
        aggregate = aggregate_drop(updates, model)
    elif cfg.aggregation == "layerwise":
        if cfg.forced_p is not None:
            p = cfg.forced_p
        elif cfg.use_bound_correction:
            p = [
                no_contributor_prob_bound(l, num_layers, len(clients), m, deadline)
                for l in range(1, num_layers + 1)
            ]
        else:
            p = no_contributor_probs(clients, batches_per_client, deadline, num_layers)
        aggregate = aggregate_layerwise(updates, model, p)
    else:
        raise DomainError(f"unknown aggregation rule {cfg.aggregation!r}")
    return RoundOutcome(
        round_index=t,
        deadline=deadline,
        contributor_sets=contributor_sets,
        depth_samples=depth_samples,
        aggregate_model=aggregate,
        elapsed=deadline,
    )


def run_unbounded_round(
    objective,
    model: LayeredModel,
    t: int,
    clients: list[ClientProfile],
    batches_per_client: dict[int, int],
    master_seed: int,
    cfg: RoundConfig,
) -> tuple[LayeredModel, float]:
    """One round with no deadline: every client finishes all layers and the
    round costs the slowest client's simulated finish time (compute plus
    communication).  Returns the new model and the round's wall-clock cost.
    """
    num_layers = model.num_layers
    updates = []
    slowest = 0.0
    for client in clients:
        size = batches_per_client[client.id]
        rng = client_round_rng(master_seed, t, client.id)
        mean = size / client.compute_rate
        # Same chunked stream layout as the deadline-limited sampler, so the
        # first draws coincide with the other methods' draws.
        draws: list[float] = []
        while len(draws) < num_layers:
            draws.extend(rng.exponential(size=64) * mean)
        compute_time = float(np.sum(draws[:num_layers]))
        slowest = max(slowest, compute_time + client.comm_time)
        batch_draws = [
            rng.integers(0, objective.data_size(client.id), size=size)
            for _ in range(cfg.local_iters)
        ]
        updates.append(
            local_sgd_update(
                objective, model, client.id, batch_draws, cfg.eta, 1,
                weight_decay=cfg.weight_decay,
            )
        )
    return aggregate_fedavg(updates, model), slowest
