"""Tests for synthetic quadratic tasks and dataset ingestion."""

import struct

import numpy as np
import pytest

from flsched.errors import ConfigError, DomainError, SingularTaskError
from flsched.tasks import (
    ClassificationDataset,
    QuadraticFederatedTask,
    estimate_grad_bound_sq,
    estimate_noise_scales,
    make_quadratic_task,
    partition_label_skew,
    read_idx,
)


class TestQuadraticTask:
    def test_scalar_het_gap_oracle(self):
        # Two scalar users: F_1(w) = 0.5 (w - 1)^2, F_2(w) = 0.5 (w + 1)^2.
        # Global optimum 0, global loss there 0.5, per-user minima 0, so the
        # gap is 0.5.
        task = QuadraticFederatedTask(
            a_mats=[np.array([[1.0]]), np.array([[1.0]])],
            targets=[np.array([1.0]), np.array([-1.0])],
        )
        assert task.w_opt == pytest.approx(0.0, abs=1e-12)
        assert task.het_gap() == pytest.approx(0.5, rel=1e-12)

    def test_zero_gap_for_identical_users(self):
        rng = np.random.default_rng(0)
        a = np.eye(4) + 0.1 * rng.normal(size=(4, 4))
        b = rng.normal(size=4)
        task = QuadraticFederatedTask(a_mats=[a.copy(), a.copy()], targets=[b.copy(), b.copy()])
        assert task.het_gap() == pytest.approx(0.0, abs=1e-10)

    def test_optimum_solves_normal_equations(self):
        # The global optimum must zero the averaged gradient.
        rng = np.random.default_rng(1)
        for trial in range(100):
            num_users = int(rng.integers(2, 6))
            dim = int(rng.integers(1, 8))
            task = make_quadratic_task(
                num_users=num_users,
                dim=dim,
                heterogeneity=float(rng.uniform(0.0, 0.8)),
                rng=rng,
                samples_per_user=int(rng.integers(dim, 2 * dim + 1)),
            )
            grad = np.mean(
                [task.user_gradient(task.w_opt, u) for u in range(num_users)], axis=0
            )
            assert float(np.linalg.norm(grad)) <= 1e-8

    def test_curvature_constants_match_eigensolver(self):
        rng = np.random.default_rng(2)
        task = make_quadratic_task(num_users=3, dim=5, heterogeneity=0.4, rng=rng)
        eigvals = np.linalg.eigvalsh(task.averaged_hessian())
        assert task.rho_c == pytest.approx(float(eigvals[0]), rel=1e-12)
        assert task.rho_s == pytest.approx(float(eigvals[-1]), rel=1e-12)
        assert 0.0 < task.rho_c <= task.rho_s

    def test_rejects_singular_task(self):
        a = np.zeros((2, 2))
        with pytest.raises(SingularTaskError):
            QuadraticFederatedTask(a_mats=[a, a], targets=[np.zeros(2), np.zeros(2)])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ConfigError):
            QuadraticFederatedTask(
                a_mats=[np.eye(2), np.eye(3)],
                targets=[np.zeros(2), np.zeros(3)],
            )

    def test_generator_guards(self):
        rng = np.random.default_rng(3)
        with pytest.raises(DomainError):
            make_quadratic_task(num_users=1, dim=3, heterogeneity=0.1, rng=rng)
        with pytest.raises(DomainError):
            make_quadratic_task(num_users=2, dim=3, heterogeneity=-0.1, rng=rng)
        with pytest.raises(DomainError):
            make_quadratic_task(
                num_users=2, dim=3, heterogeneity=0.1, rng=rng, samples_per_user=2
            )


class TestAnalysisEstimates:
    def test_noise_scales_cover_single_sample_variance_at_opt(self):
        rng = np.random.default_rng(4)
        task = make_quadratic_task(num_users=3, dim=4, heterogeneity=0.5, rng=rng)
        scales = estimate_noise_scales(task, np.random.default_rng(5))
        assert len(scales) == 3
        for u in range(3):
            a, b = task.a_mats[u], task.targets[u]
            residual = a @ task.w_opt - b
            grads = a * residual[:, None]
            var = float(np.mean(np.sum((grads - grads.mean(axis=0)) ** 2, axis=1)))
            assert scales[u] >= var - 1e-12

    def test_noise_scales_zero_for_exactly_solvable_user(self):
        # With heterogeneity 0 the residual vanishes only at the optimum, but
        # the ball maximization keeps the estimate strictly positive.
        rng = np.random.default_rng(6)
        task = make_quadratic_task(num_users=2, dim=3, heterogeneity=0.0, rng=rng)
        scales = estimate_noise_scales(task, np.random.default_rng(7))
        assert all(s >= 0.0 for s in scales)

    def test_grad_bound_covers_single_sample_norms(self):
        rng = np.random.default_rng(8)
        task = make_quadratic_task(num_users=2, dim=4, heterogeneity=0.3, rng=rng)
        bound = estimate_grad_bound_sq(task, np.random.default_rng(9))
        for u in range(2):
            a, b = task.a_mats[u], task.targets[u]
            residual = a @ task.w_opt - b
            norms = np.sum((a * residual[:, None]) ** 2, axis=1)
            assert bound >= float(norms.max()) - 1e-12


def _write_idx_pair(tmp_path, images, labels, image_magic=0x803, label_magic=0x801,
                    label_count=None, truncate_images=False):
    count, rows, cols = images.shape
    images_path = tmp_path / "images.idx"
    labels_path = tmp_path / "labels.idx"
    payload = images.astype(np.uint8).tobytes()
    if truncate_images:
        payload = payload[:-1]
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", image_magic, count, rows, cols))
        fh.write(payload)
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", label_magic, label_count if label_count is not None else len(labels)))
        fh.write(bytes(labels.tolist()))
    return str(images_path), str(labels_path)


class TestReadIdx:
    def _example(self):
        images = np.array(
            [[[0, 255], [128, 64]], [[255, 0], [0, 255]]], dtype=np.uint8
        )
        labels = np.array([3, 7], dtype=np.uint8)
        return images, labels

    def test_round_trip(self, tmp_path):
        images, labels = self._example()
        ip, lp = _write_idx_pair(tmp_path, images, labels)
        ds = read_idx(ip, lp)
        assert ds.samples.shape == (2, 4)
        np.testing.assert_allclose(ds.samples[0], [0.0, 1.0, 128 / 255.0, 64 / 255.0])
        np.testing.assert_array_equal(ds.labels, [3, 7])

    def test_limit(self, tmp_path):
        images, labels = self._example()
        ip, lp = _write_idx_pair(tmp_path, images, labels)
        ds = read_idx(ip, lp, limit=1)
        assert ds.num_samples == 1
        assert ds.labels[0] == 3
        assert read_idx(ip, lp, limit=0).num_samples == 0
        with pytest.raises(ConfigError):
            read_idx(ip, lp, limit=-1)

    def test_bad_image_magic(self, tmp_path):
        images, labels = self._example()
        ip, lp = _write_idx_pair(tmp_path, images, labels, image_magic=0x804)
        with pytest.raises(ConfigError):
            read_idx(ip, lp)

    def test_bad_label_magic(self, tmp_path):
        images, labels = self._example()
        ip, lp = _write_idx_pair(tmp_path, images, labels, label_magic=0x800)
        with pytest.raises(ConfigError):
            read_idx(ip, lp)

    def test_truncated_payload(self, tmp_path):
        images, labels = self._example()
        ip, lp = _write_idx_pair(tmp_path, images, labels, truncate_images=True)
        with pytest.raises(ConfigError):
            read_idx(ip, lp)

    def test_count_mismatch(self, tmp_path):
        images, labels = self._example()
        ip, lp = _write_idx_pair(tmp_path, images, np.array([3], dtype=np.uint8),
                                 label_count=1)
        with pytest.raises(ConfigError):
            read_idx(ip, lp)


class TestPartitionLabelSkew:
    def _dataset(self, n=10, classes=2, seed=0):
        rng = np.random.default_rng(seed)
        return ClassificationDataset(
            samples=rng.uniform(size=(n, 3)),
            labels=np.repeat(np.arange(classes), n // classes),
        )

    def test_uniform_split_sizes(self):
        ds = self._dataset(n=10)
        parts = partition_label_skew(ds, 2, 0.0, np.random.default_rng(1))
        assert sorted(len(p) for p in parts) == [5, 5]

    def test_disjoint_and_covering(self):
        ds = self._dataset(n=31, classes=1)
        for skew in (0.0, 0.4, 1.0):
            parts = partition_label_skew(ds, 4, skew, np.random.default_rng(2))
            combined = np.concatenate(parts)
            assert len(combined) == 31
            assert len(np.unique(combined)) == 31
            sizes = sorted(len(p) for p in parts)
            assert sizes == [7, 8, 8, 8]

    def test_full_skew_concentrates_labels(self):
        ds = self._dataset(n=40, classes=4)
        parts = partition_label_skew(ds, 4, 1.0, np.random.default_rng(3))
        for part in parts:
            labels = ds.labels[part]
            top = np.bincount(labels).max()
            assert top / len(labels) >= 0.9

    def test_guards(self):
        ds = self._dataset(n=4)
        with pytest.raises(ConfigError):
            partition_label_skew(ds, 5, 0.0, np.random.default_rng(4))
        with pytest.raises(DomainError):
            partition_label_skew(ds, 2, 1.5, np.random.default_rng(4))
