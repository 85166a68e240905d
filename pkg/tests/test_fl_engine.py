"""Tests for the layered training engine and aggregation rules."""

import numpy as np
import pytest

from flsched.errors import DomainError, FlschedError
from flsched.fl_engine import (
    LayeredModel,
    MlpObjective,
    PartialUpdate,
    QuadraticObjective,
    RoundConfig,
    aggregate_drop,
    aggregate_fedavg,
    aggregate_layerwise,
    local_sgd_update,
    no_contributor_probs,
    run_round,
    run_unbounded_round,
)
from flsched.system_model import ClientProfile, Schedule
from flsched.tasks import ClassificationDataset, make_quadratic_task


def _update(cid, depth, layers):
    return PartialUpdate(
        client_id=cid,
        reached_depth=depth,
        layer_params=tuple(np.asarray(x, dtype=np.float64) for x in layers),
    )


def _quadratic_objective(num_layers=2, num_users=2, dim=4, seed=0, het=0.3):
    task = make_quadratic_task(
        num_users=num_users, dim=dim, heterogeneity=het,
        rng=np.random.default_rng(seed),
    )
    return QuadraticObjective(task, num_layers)


def _mlp_objective(seed=0, hidden=(5, 4), num_users=2):
    rng = np.random.default_rng(seed)
    n, features, classes = 40, 6, 3
    samples = rng.uniform(size=(n, features))
    labels = rng.integers(0, classes, size=n)
    partition = [np.arange(0, n // 2), np.arange(n // 2, n)]
    dataset = ClassificationDataset(samples=samples, labels=labels, partition=partition)
    return MlpObjective(dataset, hidden=hidden, num_classes=classes)


class TestLayeredModel:
    def test_flat_round_trip(self):
        model = LayeredModel([np.array([1.0, 2.0]), np.array([3.0])])
        rebuilt = LayeredModel.from_flat(model.flat(), model.layer_dims)
        for a, b in zip(model.layers, rebuilt.layers):
            np.testing.assert_array_equal(a, b)

    def test_copy_is_deep(self):
        model = LayeredModel([np.array([1.0])])
        clone = model.copy()
        clone.layers[0][0] = 99.0
        assert model.layers[0][0] == 1.0

    def test_size_mismatch(self):
        with pytest.raises(DomainError):
            LayeredModel.from_flat(np.zeros(3), (2, 2))

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            LayeredModel([])


class TestPartialUpdate:
    def test_layer_indexing(self):
        update = _update(0, 2, [[1.0], [2.0]])
        assert update.layer(2)[0] == 1.0
        assert update.layer(3)[0] == 2.0
        with pytest.raises(DomainError):
            update.layer(1)


class TestAggregation:
    def test_fedavg_mean(self):
        prev = LayeredModel([np.zeros(2), np.zeros(1)])
        updates = [
            _update(0, 1, [[1.0, 2.0], [3.0]]),
            _update(1, 1, [[3.0, 4.0], [5.0]]),
        ]
        out = aggregate_fedavg(updates, prev)
        np.testing.assert_array_equal(out.layers[0], [2.0, 3.0])
        np.testing.assert_array_equal(out.layers[1], [4.0])

    def test_fedavg_rejects_partial(self):
        prev = LayeredModel([np.zeros(1), np.zeros(1)])
        with pytest.raises(FlschedError):
            aggregate_fedavg([_update(0, 2, [[1.0]])], prev)

    def test_drop_uses_complete_subset(self):
        prev = LayeredModel([np.zeros(1), np.zeros(1)])
        updates = [
            _update(0, 1, [[2.0], [4.0]]),
            _update(1, 3, []),
            _update(2, 1, [[6.0], [8.0]]),
        ]
        out = aggregate_drop(updates, prev)
        np.testing.assert_array_equal(out.layers[0], [4.0])
        np.testing.assert_array_equal(out.layers[1], [6.0])

    def test_drop_falls_back_to_previous(self):
        prev = LayeredModel([np.array([7.0]), np.array([8.0])])
        out = aggregate_drop([_update(0, 3, [])], prev)
        np.testing.assert_array_equal(out.layers[0], [7.0])
        np.testing.assert_array_equal(out.layers[1], [8.0])
        assert out.layers[0] is not prev.layers[0]

    def test_layerwise_bias_correction_example(self):
        # Single contributor with value 1, previous layer 0, p = 0.1:
        # corrected value = (1 - 0.1 * 0) / 0.9 = 1.1111...
        prev = LayeredModel([np.zeros(1)])
        out = aggregate_layerwise([_update(0, 1, [[1.0]])], prev, [0.1])
        assert out.layers[0][0] == pytest.approx(1.0 / 0.9, rel=1e-12)

    def test_layerwise_reduces_to_fedavg_at_p_zero(self):
        prev = LayeredModel([np.zeros(2), np.zeros(2)])
        rng = np.random.default_rng(3)
        updates = [
            _update(u, 1, [rng.normal(size=2), rng.normal(size=2)]) for u in range(3)
        ]
        plain = aggregate_fedavg(updates, prev)
        corrected = aggregate_layerwise(updates, prev, [0.0, 0.0])
        for a, b in zip(plain.layers, corrected.layers):
            np.testing.assert_array_equal(a, b)

    def test_layerwise_keeps_previous_when_no_contributors(self):
        prev = LayeredModel([np.array([5.0]), np.array([6.0])])
        out = aggregate_layerwise([_update(0, 2, [[1.0]])], prev, [0.2, 0.2])
        np.testing.assert_array_equal(out.layers[0], [5.0])
        assert out.layers[1][0] == pytest.approx((1.0 - 0.2 * 6.0) / 0.8)

    def test_layerwise_probability_guard(self):
        prev = LayeredModel([np.zeros(1)])
        with pytest.raises(DomainError):
            aggregate_layerwise([], prev, [1.0])
        with pytest.raises(DomainError):
            aggregate_layerwise([], prev, [0.1, 0.1])


class TestLocalSgd:
    def test_quadratic_single_step_oracle(self):
        # One batch and one step: layer l becomes w_l - eta (g_l + wd w_l)
        # with g the exact batch-mean gradient slice.
        objective = _quadratic_objective(num_layers=2, dim=4)
        model = objective.initial_model(np.random.default_rng(1))
        idx = np.array([0, 2, 3])
        eta, wd = 0.1, 0.01
        update = local_sgd_update(objective, model, 0, [idx], eta, 1, weight_decay=wd)
        grads = objective.gradient(model, 0, idx, 1)
        for offset in range(2):
            expected = model.layers[offset] - eta * (
                grads[offset] + wd * model.layers[offset]
            )
            np.testing.assert_allclose(update.layer(offset + 1), expected, rtol=1e-12)

    def test_truncated_depth_omits_lower_layers(self):
        objective = _quadratic_objective(num_layers=3, dim=6)
        model = objective.initial_model(np.random.default_rng(2))
        update = local_sgd_update(
            objective, model, 0, [np.array([0, 1])], 0.05, 2
        )
        assert update.reached_depth == 2
        assert len(update.layer_params) == 2

    def test_no_layers_reached(self):
        objective = _quadratic_objective(num_layers=2, dim=4)
        model = objective.initial_model(np.random.default_rng(3))
        update = local_sgd_update(objective, model, 0, [np.array([0])], 0.05, 3)
        assert update.layer_params == ()

    def test_guards(self):
        objective = _quadratic_objective(num_layers=2, dim=4)
        model = objective.initial_model(np.random.default_rng(4))
        with pytest.raises(DomainError):
            local_sgd_update(objective, model, 0, [], 0.05, 1)
        with pytest.raises(DomainError):
            local_sgd_update(objective, model, 0, [np.array([0])], 0.05, 4)
        with pytest.raises(FlschedError):
            local_sgd_update(objective, model, 0, [np.array([], dtype=int)], 0.05, 1)


class TestMlpGradients:
    def test_finite_difference_check(self):
        # Relative error of analytic vs central-difference gradients on a
        # 2-hidden-layer network must stay below 1e-4.
        objective = _mlp_objective()
        model = objective.initial_model(np.random.default_rng(5), spread=0.5)
        idx = np.arange(12)
        part = objective.dataset.partition[0]
        x = objective.dataset.samples[part[idx]]
        y = objective.dataset.labels[part[idx]]
        grads = objective.gradient(model, 0, idx, 1)
        eps = 1e-6
        for l in range(objective.num_layers):
            analytic = grads[l]
            numeric = np.zeros_like(analytic)
            probe = np.random.default_rng(6 + l).choice(
                analytic.size, size=min(25, analytic.size), replace=False
            )
            for i in probe:
                plus = model.copy()
                minus = model.copy()
                plus.layers[l][i] += eps
                minus.layers[l][i] -= eps
                numeric[i] = (
                    objective.loss(plus, x, y) - objective.loss(minus, x, y)
                ) / (2.0 * eps)
            num = numeric[probe]
            ana = analytic[probe]
            rel = np.abs(ana - num) / np.maximum(np.abs(num), 1e-8)
            assert float(rel.max()) <= 1e-4

    def test_truncated_backprop_matches_full(self):
        objective = _mlp_objective()
        model = objective.initial_model(np.random.default_rng(7), spread=0.3)
        idx = np.arange(10)
        full = objective.gradient(model, 0, idx, 1)
        for depth in range(2, objective.num_layers + 1):
            truncated = objective.gradient(model, 0, idx, depth)
            for offset, grad in enumerate(truncated):
                np.testing.assert_array_equal(grad, full[depth - 1 + offset])


def _engine_setup(num_layers=3, seed=0):
    objective = _quadratic_objective(num_layers=num_layers, num_users=3, dim=6, seed=seed)
    model = objective.initial_model(np.random.default_rng(seed + 1))
    clients = [
        ClientProfile(id=u, compute_rate=3.0 + u, comm_time=0.1) for u in range(3)
    ]
    schedule = Schedule(deadlines=(4.0, 3.0), batch_scale=1.5)
    return objective, model, clients, schedule


class TestRunRound:
    def test_forced_full_depth_with_zero_p_is_fedavg(self):
        objective, model, clients, schedule = _engine_setup()
        cfg = RoundConfig(
            eta=0.05,
            aggregation="layerwise",
            forced_depths={u: 3 for u in range(3)},
            forced_p=[0.0, 0.0, 0.0],
        )
        outcome = run_round(objective, model, schedule, 1, clients, 9, cfg)
        cfg_avg = RoundConfig(
            eta=0.05, aggregation="fedavg", forced_depths={u: 3 for u in range(3)}
        )
        reference = run_round(objective, model, schedule, 1, clients, 9, cfg_avg)
        for a, b in zip(outcome.aggregate_model.layers, reference.aggregate_model.layers):
            np.testing.assert_array_equal(a, b)

    def test_forced_zero_depth_keeps_model(self):
        objective, model, clients, schedule = _engine_setup()
        cfg = RoundConfig(
            eta=0.05,
            aggregation="layerwise",
            forced_depths={u: 0 for u in range(3)},
            forced_p=[0.0, 0.0, 0.0],
        )
        outcome = run_round(objective, model, schedule, 1, clients, 9, cfg)
        for a, b in zip(outcome.aggregate_model.layers, model.layers):
            np.testing.assert_array_equal(a, b)

    def test_contributor_sets_are_nested(self):
        objective, model, clients, schedule = _engine_setup()
        cfg = RoundConfig(eta=0.05, aggregation="layerwise")
        for t in (1, 2):
            for seed in range(10):
                outcome = run_round(objective, model, schedule, t, clients, seed, cfg)
                sets = [set(s) for s in outcome.contributor_sets]
                for shallow, deep in zip(sets, sets[1:]):
                    assert shallow <= deep
                assert outcome.elapsed == schedule.deadlines[t - 1]

    def test_seeded_replay_is_identical(self):
        objective, model, clients, schedule = _engine_setup()
        cfg = RoundConfig(eta=0.05, aggregation="layerwise")
        a = run_round(objective, model, schedule, 1, clients, 31, cfg)
        b = run_round(objective, model, schedule, 1, clients, 31, cfg)
        for x, y in zip(a.aggregate_model.layers, b.aggregate_model.layers):
            np.testing.assert_array_equal(x, y)
        assert [s.layers_completed for s in a.depth_samples] == [
            s.layers_completed for s in b.depth_samples
        ]

    def test_descent_with_full_depth_and_full_batches(self):
        # Homogeneous users, full depth, full-batch gradients, and a small
        # step: the averaged update is plain gradient descent on a strongly
        # convex quadratic, so the distance to the optimum shrinks.
        task = make_quadratic_task(
            num_users=2, dim=4, heterogeneity=0.0, rng=np.random.default_rng(11)
        )
        objective = QuadraticObjective(task, 2)
        model = objective.initial_model(np.random.default_rng(12))
        clients = [ClientProfile(id=u, compute_rate=5.0) for u in range(2)]
        schedule = Schedule(deadlines=(4.0,) * 5, batch_scale=10.0)
        cfg = RoundConfig(
            eta=0.1,
            aggregation="layerwise",
            forced_depths={0: 2, 1: 2},
            forced_p=[0.0, 0.0],
            batch_sizes={u: task.data_size(u) for u in range(2)},
        )
        distances = [objective.distance_sq(model)]
        for t in range(1, 6):
            outcome = run_round(objective, model, schedule, t, clients, 13, cfg)
            model = outcome.aggregate_model
            distances.append(objective.distance_sq(model))
        assert distances[-1] < distances[0]

    def test_unknown_aggregation(self):
        objective, model, clients, schedule = _engine_setup()
        cfg = RoundConfig(eta=0.05, aggregation="median")
        with pytest.raises(DomainError):
            run_round(objective, model, schedule, 1, clients, 0, cfg)


class TestUnboundedRound:
    def test_full_participation_and_positive_cost(self):
        objective, model, clients, _ = _engine_setup()
        cfg = RoundConfig(eta=0.05)
        batches = {u: 4 for u in range(3)}
        new_model, elapsed = run_unbounded_round(
            objective, model, 1, clients, batches, 17, cfg
        )
        assert elapsed > max(c.comm_time for c in clients)
        assert any(
            not np.array_equal(a, b)
            for a, b in zip(new_model.layers, model.layers)
        )

    def test_deterministic(self):
        objective, model, clients, _ = _engine_setup()
        cfg = RoundConfig(eta=0.05)
        batches = {u: 4 for u in range(3)}
        a = run_unbounded_round(objective, model, 1, clients, batches, 17, cfg)
        b = run_unbounded_round(objective, model, 1, clients, batches, 17, cfg)
        assert a[1] == b[1]
        for x, y in zip(a[0].layers, b[0].layers):
            np.testing.assert_array_equal(x, y)


class TestNoContributorProbs:
    def test_matches_exact_formula(self):
        from flsched.gamma_math import poisson_cdf

        clients = [
            ClientProfile(id=0, compute_rate=2.0, comm_time=0.5),
            ClientProfile(id=1, compute_rate=4.0, comm_time=0.0),
        ]
        batches = {0: 3, 1: 5}
        deadline, num_layers = 4.0, 3
        probs = no_contributor_probs(clients, batches, deadline, num_layers)
        for l in range(1, num_layers + 1):
            expected = 1.0
            for c in clients:
                lam = c.compute_rate / batches[c.id] * (deadline - c.comm_time)
                expected *= poisson_cdf(num_layers - l, lam)
            assert probs[l - 1] == pytest.approx(expected, rel=1e-12)
