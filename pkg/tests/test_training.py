import math

import numpy as np
import pytest

from marginlab import training
from marginlab.data import GmmComponent, GmmSpec, sample_gmm
from marginlab.linalg import InvalidInputError
from marginlab.network import (
    Dense,
    LinearHead,
    NetworkSpec,
    SoftmaxHead,
    batch_jacobians,
    jacobian_frobenius_norms,
    network_jacobian,
    random_network,
    switching_distance,
)
from marginlab.training import (
    CCE,
    NO_REG,
    LossKind,
    OptimizerState,
    RegKind,
    TrainConfig,
    cross_entropy_from_probs,
    grad_check,
    jacobian_penalty,
    loss_value,
    objective,
    objective_and_gradients,
    sgd_step,
    train,
)

HINGE = LossKind("hinge")


def kink_free_batch(net, rng, n=6, guard=1e-3):
    """``n`` inputs whose ReLU pre-activations and max-pool gaps all exceed ``guard``."""
    X = rng.standard_normal((200 * n, net.input_dim))
    ok = X[switching_distance(net, X) > guard]
    assert len(ok) >= n, "no kink-free batch found"
    return ok[:n]


class TestLosses:
    def test_cce_symmetric_output(self):
        net = NetworkSpec((SoftmaxHead(np.zeros((2, 2)), np.zeros(2)),))
        assert loss_value(net, np.ones((1, 2)), [0]) == pytest.approx(math.log(2), abs=1e-15)
        assert cross_entropy_from_probs([[0.5, 0.5]], [0]) == pytest.approx(math.log(2))

    def test_cce_saturated_logits(self):
        net = NetworkSpec((SoftmaxHead(np.array([[30.0], [-30.0]]), np.zeros(2)),))
        assert 0 <= loss_value(net, np.ones((1, 1)), [0]) <= 1e-6

    def test_cce_probability_clamp(self):
        assert cross_entropy_from_probs([[0.0, 1.0]], [0]) == pytest.approx(30.0)

    def test_hinge_satisfied_margin(self):
        net = NetworkSpec((LinearHead(np.eye(2), np.zeros(2)),))
        assert loss_value(net, np.array([[2.0, 0.0]]), [0], HINGE) == 0.0

    def test_hinge_multiclass_mean(self):
        # scores (1, 0.5, 2), label 0: slacks 1-(0.5)=0.5 and 1-(-1)=2 -> mean 1.25
        net = NetworkSpec((LinearHead(np.eye(3), np.zeros(3)),))
        assert loss_value(net, np.array([[1.0, 0.5, 2.0]]), [0], HINGE) == pytest.approx(1.25)

    def test_label_out_of_range(self):
        net = NetworkSpec((SoftmaxHead(np.eye(2), np.zeros(2)),))
        with pytest.raises(InvalidInputError):
            loss_value(net, np.ones((1, 2)), [2])

    def test_loss_head_pairing(self):
        with pytest.raises(InvalidInputError):
            loss_value(NetworkSpec((LinearHead(np.eye(2), np.zeros(2)),)), np.ones((1, 2)), [0], CCE)
        with pytest.raises(InvalidInputError):
            loss_value(NetworkSpec((SoftmaxHead(np.eye(2), np.zeros(2)),)), np.ones((1, 2)), [0], HINGE)

    def test_negative_lambda_rejected(self):
        with pytest.raises(InvalidInputError):
            RegKind("weight_decay", -1.0)


class TestGradients:
    def test_linear_net_penalty_closed_form(self):
        rng = np.random.default_rng(0)
        W = rng.standard_normal((3, 4))
        net = NetworkSpec((LinearHead(W, np.zeros(3)),))
        X = rng.standard_normal((5, 4))
        value, grads = objective_and_gradients(net, X, np.zeros(5, dtype=int), None, RegKind("jacobian", 1.0))
        assert value == pytest.approx(np.sum(W * W), rel=1e-14)
        np.testing.assert_allclose(grads[0], 2 * W, rtol=1e-14)
        np.testing.assert_array_equal(grads[1], np.zeros(3))

    def test_penalty_value_matches_jacobian(self):
        rng = np.random.default_rng(1)
        net = random_network(rng, 4, [6, 5], 3, "tanh", pool_after=0)
        X = rng.standard_normal((4, 4))
        direct = np.mean([np.sum(network_jacobian(net, x) ** 2) for x in X])
        assert jacobian_penalty(net, X) == pytest.approx(direct, rel=1e-10)
        value, _ = objective_and_gradients(net, X, np.zeros(4, dtype=int), None, RegKind("jacobian", 1.0))
        assert value == pytest.approx(direct, rel=1e-10)

    def test_sampled_rows_enumerate_to_full_penalty(self):
        rng = np.random.default_rng(2)
        net = random_network(rng, 5, [7], 3, "sigmoid")
        X = rng.standard_normal((4, 5))
        y = np.zeros(4, dtype=int)
        reg = RegKind("jacobian_sampled_row", 1.0)
        total = 0.0
        grad_total = None
        for r in range(3):
            E = np.zeros((4, 1, 3))
            E[:, 0, r] = 1.0
            v, g = objective_and_gradients(net, X, y, None, reg, rows=E)
            total += v
            grad_total = g if grad_total is None else [a + b for a, b in zip(grad_total, g)]
        v_full, g_full = objective_and_gradients(net, X, y, None, RegKind("jacobian", 1.0))
        assert total == pytest.approx(v_full, rel=1e-13)
        for a, b in zip(grad_total, g_full):
            np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-14)

    def test_lambda_zero_is_plain_loss(self):
        rng = np.random.default_rng(3)
        net = random_network(rng, 4, [6], 3, "tanh")
        X, y = rng.standard_normal((5, 4)), rng.integers(0, 3, 5)
        _, g0 = objective_and_gradients(net, X, y, CCE, NO_REG)
        _, g1 = objective_and_gradients(net, X, y, CCE, RegKind("jacobian", 0.0))
        for a, b in zip(g0, g1):
            np.testing.assert_array_equal(a, b)
        assert grad_check(net, X, y, CCE, NO_REG) <= 1e-5

    def test_weight_decay_skips_biases(self):
        net = NetworkSpec((LinearHead(np.array([[1.0, 2.0]]), np.array([3.0])),))
        v, g = objective_and_gradients(net, np.zeros((1, 2)), [0], None, RegKind("weight_decay", 0.5))
        assert v == pytest.approx(0.5 * 5.0)
        np.testing.assert_array_equal(g[0], [[1.0, 2.0]])
        np.testing.assert_array_equal(g[1], [0.0])

    @pytest.mark.parametrize("act", ["sigmoid", "tanh"])
    @pytest.mark.parametrize("reg", ["none", "weight_decay", "jacobian", "jacobian_sampled_row"])
    def test_smooth_configs(self, act, reg):
        rng = np.random.default_rng(hash((act, reg)) % 2**32)
        for head, loss in (("softmax", CCE), ("linear", HINGE)):
            net = random_network(rng, 5, [8, 6], 3, act, head=head, pool_after=0, pool_kind="average", residual_at=1)
            X = rng.standard_normal((6, 5))
            y = rng.integers(0, 3, 6)
            assert grad_check(net, X, y, loss, RegKind(reg, 0.3)) <= 1e-6

    @pytest.mark.parametrize("reg", ["none", "weight_decay", "jacobian", "jacobian_sampled_row"])
    def test_relu_away_from_kinks(self, reg):
        rng = np.random.default_rng(17)
        net = random_network(rng, 5, [8, 6], 3, "relu", pool_after=0, pool_kind="max")
        X = kink_free_batch(net, rng)
        y = rng.integers(0, 3, 6)
        assert grad_check(net, X, y, CCE, RegKind(reg, 0.3)) <= 1e-5

    def test_corrupted_gradient_detected(self, monkeypatch):
        rng = np.random.default_rng(4)
        net = random_network(rng, 4, [5], 3, "tanh")
        X, y = rng.standard_normal((4, 4)), rng.integers(0, 3, 4)
        real = training.objective_and_gradients

        def corrupted(*a, **k):
            v, g = real(*a, **k)
            g[0] = g[0] * 1.5
            return v, g

        monkeypatch.setattr(training, "objective_and_gradients", corrupted)
        assert grad_check(net, X, y) > 1e-2

    def test_objective_matches_gradient_routine_value(self):
        rng = np.random.default_rng(5)
        net = random_network(rng, 4, [6], 3, "sigmoid")
        X, y = rng.standard_normal((5, 4)), rng.integers(0, 3, 5)
        for reg in (RegKind("weight_decay", 0.1), RegKind("jacobian", 0.2)):
            v, _ = objective_and_gradients(net, X, y, CCE, reg)
            assert v == pytest.approx(objective(net, X, y, CCE, reg), rel=1e-12)

    def test_bad_step(self):
        with pytest.raises(InvalidInputError):
            grad_check(random_network(0, 2, [2], 2), np.ones((1, 2)), [0], step=0.0)


class TestSgd:
    def test_plain_step_to_zero(self):
        p = [np.array([1.0, -2.0])]
        out = sgd_step(OptimizerState.zeros_like(p), p, [p[0].copy()], rate=1.0, momentum=0.0)
        np.testing.assert_array_equal(out[0], [0.0, 0.0])

    def test_zero_gradient_decays_velocity(self):
        p = [np.array([1.0])]
        state = OptimizerState([np.array([2.0])])
        out = sgd_step(state, p, [np.zeros(1)], rate=0.1, momentum=0.9)
        np.testing.assert_allclose(state.velocity[0], [1.8])
        np.testing.assert_allclose(out[0], [2.8])

    def test_two_steps_hand_recursion(self):
        p0, g1, g2 = np.array([1.0]), np.array([0.5]), np.array([-0.25])
        state = OptimizerState.zeros_like([p0])
        p1 = sgd_step(state, [p0], [g1], 0.1, 0.9)
        p2 = sgd_step(state, p1, [g2], 0.1, 0.9)
        v1 = -0.1 * 0.5
        v2 = 0.9 * v1 - 0.1 * -0.25
        assert p2[0][0] == 1.0 + v1 + v2
        assert state.step == 2

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            sgd_step(OptimizerState.zeros_like([np.zeros(2)]), [np.zeros(2)], [], 0.1)


def separable_gmm(seed=0):
    comps = (
        GmmComponent((-3.0, 0.0), ((0.5, 0.0), (0.0, 0.5)), 0),
        GmmComponent((3.0, 0.0), ((0.5, 0.0), (0.0, 0.5)), 1),
    )
    return GmmSpec(comps, 2, seed)


class TestTrain:
    def test_separable_reaches_full_accuracy(self):
        ds = sample_gmm(separable_gmm(), 200, seed=0)
        # Gap between means is 6 against a per-axis std of 0.5; no sample crosses x = 0.
        assert np.all((ds.X[:, 0] > 0) == (ds.y == 1))
        net = random_network(0, 2, [8], 2, "relu")
        cfg = TrainConfig(batch_size=20, epochs=50, seed=0, schedule=((0.05, 50),))
        _, hist = train(net, ds, cfg)
        assert hist[-1]["train_acc"] == 1.0

    def test_deterministic(self):
        ds = sample_gmm(separable_gmm(), 100, seed=1)
        cfg = TrainConfig(batch_size=16, epochs=3, seed=4, reg=RegKind("jacobian_sampled_row", 0.1), schedule=((0.05, 3),))
        a, ha = train(random_network(2, 2, [6], 2, "tanh"), ds, cfg)
        b, hb = train(random_network(2, 2, [6], 2, "tanh"), ds, cfg)
        np.testing.assert_equal(ha, hb)
        for p, q in zip(a.parameters(), b.parameters()):
            assert np.array_equal(p, q)

    def test_huge_penalty_collapses_jacobian(self):
        ds = sample_gmm(separable_gmm(), 100, seed=2)
        net = random_network(3, 2, [8, 8], 2, "relu")
        before = jacobian_frobenius_norms(net, ds.X)
        cfg = TrainConfig(batch_size=20, epochs=10, seed=0, reg=RegKind("jacobian", 1e6), schedule=((0.01, 10),), clip_norm=1.0)
        net, _ = train(net, ds, cfg)
        assert np.all(jacobian_frobenius_norms(net, ds.X) < before)

    def test_weight_norm_rows_stay_unit(self):
        ds = sample_gmm(separable_gmm(), 60, seed=3)
        seen = []

        def check(net, row):
            seen.append(max(np.max(np.abs(np.linalg.norm(W, axis=1) - 1)) for W in net.weight_matrices()))

        train(random_network(1, 2, [5, 5], 2, "relu"), ds,
              TrainConfig(batch_size=10, epochs=4, seed=0, weight_norm=True, schedule=((0.1, 4),)), on_epoch=check)
        assert len(seen) == 4 and max(seen) < 1e-12

    def test_history_fields_and_csv(self, tmp_path):
        ds = sample_gmm(separable_gmm(), 40, seed=5)
        test = sample_gmm(separable_gmm(), 40, seed=6)
        _, hist = train(random_network(0, 2, [4], 2), ds, TrainConfig(batch_size=8, epochs=2, schedule=((0.1, 2),)), test=test)
        assert tuple(hist[0]) == training.HISTORY_FIELDS
        assert 0 <= hist[-1]["test_acc"] <= 1
        training.write_history_csv(hist, tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == ",".join(training.HISTORY_FIELDS) and len(lines) == 3

    def test_schedule_rates(self):
        cfg = TrainConfig()
        assert [cfg.rate(e) for e in (0, 39, 40, 80, 119, 500)] == [0.01, 0.01, 0.001, 0.0001, 0.0001, 0.0001]

    def test_empty_dataset(self):
        with pytest.raises(InvalidInputError):
            train(random_network(0, 2, [2], 2), (np.zeros((0, 2)), np.zeros(0, dtype=int)), TrainConfig(epochs=1))

    def test_invalid_config(self):
        with pytest.raises(InvalidInputError):
            TrainConfig(batch_size=0)
        with pytest.raises(InvalidInputError):
            TrainConfig(epochs=0)


def test_batch_rows_agree_with_penalty_selector():
    rng = np.random.default_rng(9)
    net = random_network(rng, 3, [4], 3, "tanh")
    X = rng.standard_normal((2, 3))
    E = training.penalty_rows(RegKind("jacobian_sampled_row", 1.0, rows_per_sample=2), 2, 3, 0)
    assert E.shape == (2, 2, 3) and np.all(E.sum(axis=2) == 1)
    R = batch_jacobians(net, X, rows=E)
    full = batch_jacobians(net, X)
    for i in range(2):
        np.testing.assert_allclose(R[i], E[i] @ full[i], rtol=1e-13)
