"""Synthetic federated tasks and dataset ingestion.

Quadratic tasks have closed-form optima and analysis constants, which makes
them the workhorse for desk-scale verification.  Classification data comes
from IDX-format image/label files with a one-parameter label-skew
partitioner.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, SingularTaskError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class QuadraticFederatedTask:
    """Per-user least-squares objectives F_u(w) = mean_i 0.5 (a_i^T w - b_i)^2.

    Rows of ``a_mats[u]`` are the samples of user ``u``.  The averaged
    Hessian must be positive definite so the global optimum is unique.
    """

    a_mats: list[np.ndarray]
    targets: list[np.ndarray]
    w_opt: np.ndarray = field(init=False)
    rho_c: float = field(init=False)
    rho_s: float = field(init=False)

    def __post_init__(self) -> None:
        if len(self.a_mats) != len(self.targets) or not self.a_mats:
            raise ConfigError("need matching, nonempty per-user matrices and targets")
        dim = self.a_mats[0].shape[1]
        for a, b in zip(self.a_mats, self.targets):
            if a.ndim != 2 or a.shape[1] != dim or b.shape != (a.shape[0],):
                raise ConfigError("inconsistent per-user data shapes")
        hessian = self.averaged_hessian()
        eigvals = np.linalg.eigvalsh(hessian)
        if eigvals[0] <= 1e-12:
            raise SingularTaskError(
                f"averaged Hessian is not positive definite (min eig {eigvals[0]:.3g})"
            )
        rhs = np.mean(
            [a.T @ b / a.shape[0] for a, b in zip(self.a_mats, self.targets)], axis=0
        )
        self.w_opt = np.linalg.solve(hessian, rhs)
        self.rho_c = float(eigvals[0])
        self.rho_s = float(eigvals[-1])

    @property
    def num_users(self) -> int:
        return len(self.a_mats)

    @property
    def dim(self) -> int:
        return self.a_mats[0].shape[1]

    def data_size(self, u: int) -> int:
        return self.a_mats[u].shape[0]

    def user_hessian(self, u: int) -> np.ndarray:
        a = self.a_mats[u]
        return a.T @ a / a.shape[0]

    def averaged_hessian(self) -> np.ndarray:
        return np.mean([self.user_hessian(u) for u in range(self.num_users)], axis=0)

    def user_loss(self, w: np.ndarray, u: int) -> float:
        residual = self.a_mats[u] @ w - self.targets[u]
        return float(0.5 * np.mean(residual ** 2))

    def global_loss(self, w: np.ndarray) -> float:
        return float(np.mean([self.user_loss(w, u) for u in range(self.num_users)]))

    def user_optimum(self, u: int) -> np.ndarray:
        hessian = self.user_hessian(u)
        a, b = self.a_mats[u], self.targets[u]
        try:
            return np.linalg.solve(hessian, a.T @ b / a.shape[0])
        except np.linalg.LinAlgError as exc:
            raise SingularTaskError(f"user {u} objective is degenerate") from exc

    def user_gradient(self, w: np.ndarray, u: int, idx: np.ndarray | None = None) -> np.ndarray:
        """Mean gradient over the given sample indices (all samples if None)."""
        a, b = self.a_mats[u], self.targets[u]
        if idx is not None:
            a, b = a[idx], b[idx]
        return a.T @ (a @ w - b) / a.shape[0]

    def het_gap(self) -> float:
        """Global loss at the optimum minus the average per-user minimum."""
        per_user = np.mean(
            [self.user_loss(self.user_optimum(u), u) for u in range(self.num_users)]
        )
        return max(float(self.global_loss(self.w_opt) - per_user), 0.0)


def make_quadratic_task(
    num_users: int,
    dim: int,
    heterogeneity: float,
    rng: np.random.Generator,
    samples_per_user: int | None = None,
) -> QuadraticFederatedTask:
    """Random near-identity quadratic task with a controllable spread.

    Each user's sample matrix is stacked identity blocks plus
    ``heterogeneity`` times Gaussian noise, with targets generated from a
    per-user center displaced by the same knob; heterogeneity = 0 yields
    identical users and a zero heterogeneity gap.
    """
    if dim < 1 or num_users < 2:
        raise DomainError("need dim >= 1 and num_users >= 2")
    if heterogeneity < 0.0:
        raise DomainError("heterogeneity must be nonnegative")
    n_samples = samples_per_user if samples_per_user is not None else dim
    if n_samples < dim:
        raise DomainError("samples_per_user must be at least dim")
    reps = math.ceil(n_samples / dim)
    base = np.tile(np.eye(dim), (reps, 1))[:n_samples]
    center = rng.normal(size=dim)
    a_mats, targets = [], []
    for _ in range(num_users):
        a = base + heterogeneity * rng.normal(size=(n_samples, dim)) / math.sqrt(dim)
        c = center + heterogeneity * rng.normal(size=dim)
        a_mats.append(a)
        targets.append(a @ c)
    return QuadraticFederatedTask(a_mats=a_mats, targets=targets)


def estimate_noise_scales(
    task: QuadraticFederatedTask,
    rng: np.random.Generator,
    ball_radius: float = 2.0,
    n_points: int = 16,
) -> list[float]:
    """Per-user gradient-noise constants sigma_u^2.

    For each user, the single-sample gradient variance
    E_i ||g_i(w) - grad F_u(w)||^2 is maximized over a sampled ball around
    the optimum; a size-S with-replacement batch then has variance at most
    sigma_u^2 / S.
    """
    points = [task.w_opt + ball_radius * rng.normal(size=task.dim) for _ in range(n_points)]
    points.append(task.w_opt.copy())
    scales = []
    for u in range(task.num_users):
        a, b = task.a_mats[u], task.targets[u]
        worst = 0.0
        for w in points:
            residual = a @ w - b
            grads = a * residual[:, None]
            mean_grad = grads.mean(axis=0)
            var = float(np.mean(np.sum((grads - mean_grad) ** 2, axis=1)))
            worst = max(worst, var)
        scales.append(worst)
    return scales


def estimate_grad_bound_sq(
    task: QuadraticFederatedTask,
    rng: np.random.Generator,
    ball_radius: float = 2.0,
    n_points: int = 16,
) -> float:
    """Max squared single-sample gradient norm over a sampled ball; upper
    bounds the expected squared stochastic-gradient norm there."""
    points = [task.w_opt + ball_radius * rng.normal(size=task.dim) for _ in range(n_points)]
    points.append(task.w_opt.copy())
    worst = 0.0
    for u in range(task.num_users):
        a, b = task.a_mats[u], task.targets[u]
        for w in points:
            residual = a @ w - b
            norms = np.sum((a * residual[:, None]) ** 2, axis=1)
            worst = max(worst, float(norms.max()))
    return worst


@dataclass
class ClassificationDataset:
    """Feature vectors in [0, 1] with integer labels and an optional
    per-user partition (disjoint index lists of near-equal size)."""

    samples: np.ndarray
    labels: np.ndarray
    partition: list[np.ndarray] | None = None

    def __post_init__(self) -> None:
        if self.samples.ndim != 2 or self.labels.shape != (self.samples.shape[0],):
            raise ConfigError("samples must be (n, features) with matching labels")

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]


def read_idx(images_path: str, labels_path: str, limit: int | None = None) -> ClassificationDataset:
    """Load an IDX image/label file pair, scaling pixels to [0, 1].

    Dimensions are big-endian; image and label counts must agree.  ``limit``
    truncates deterministically from the front.
    """
    with open(images_path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise ConfigError(f"truncated IDX image header in {images_path}")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise ConfigError(f"bad IDX image magic {magic:#010x} in {images_path}")
        pixels = fh.read(count * rows * cols)
        if len(pixels) < count * rows * cols:
            raise ConfigError(f"truncated IDX image payload in {images_path}")
    with open(labels_path, "rb") as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise ConfigError(f"truncated IDX label header in {labels_path}")
        magic, label_count = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise ConfigError(f"bad IDX label magic {magic:#010x} in {labels_path}")
        raw_labels = fh.read(label_count)
        if len(raw_labels) < label_count:
            raise ConfigError(f"truncated IDX label payload in {labels_path}")
    if count != label_count:
        raise ConfigError(f"image count {count} != label count {label_count}")
    images = np.frombuffer(pixels, dtype=np.uint8).reshape(count, rows * cols)
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    if limit is not None:
        if limit < 0:
            raise ConfigError("limit must be nonnegative")
        images, labels = images[:limit], labels[:limit]
    return ClassificationDataset(samples=images.astype(np.float64) / 255.0, labels=labels)


def partition_label_skew(
    dataset: ClassificationDataset,
    num_users: int,
    skew: float,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """Split sample indices into ``num_users`` disjoint, near-equal parts.

    skew = 0 is a uniform random split; skew = 1 assigns each user a
    contiguous run of the label-sorted indices, concentrating few classes per
    user.  Intermediate values mix the two pools per user.
    """
    n = dataset.num_samples
    if num_users < 1 or num_users > n:
        raise ConfigError(f"cannot split {n} samples across {num_users} users")
    if not 0.0 <= skew <= 1.0:
        raise DomainError(f"skew must be in [0, 1], got {skew}")
    sorted_idx = np.argsort(dataset.labels, kind="stable")
    shuffled = rng.permutation(n)
    quotas = [n // num_users + (1 if u < n % num_users else 0) for u in range(num_users)]
    sorted_pos = 0
    taken = np.zeros(n, dtype=bool)
    parts: list[list[int]] = []
    for quota in quotas:
        n_sorted = int(round(skew * quota))
        part: list[int] = []
        while len(part) < n_sorted and sorted_pos < n:
            candidate = int(sorted_idx[sorted_pos])
            sorted_pos += 1
            if not taken[candidate]:
                taken[candidate] = True
                part.append(candidate)
        parts.append(part)
    cursor = 0
    for part, quota in zip(parts, quotas):
        while len(part) < quota:
            candidate = int(shuffled[cursor])
            cursor += 1
            if not taken[candidate]:
                taken[candidate] = True
                part.append(candidate)
    return [np.array(sorted(part), dtype=np.int64) for part in parts]
