"""Forward pass, layer Jacobians, chained Jacobians and the residual expansion."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marginlab.linalg import InvalidInputError, small_spectral_norm
from marginlab.network import (
    Dense,
    LinearHead,
    NetworkSpec,
    Pooling,
    Residual,
    SoftmaxHead,
    UnsupportedArchitectureError,
    average_jacobian,
    batch_jacobians,
    classify,
    dumps,
    forward,
    init_mlp,
    jacobian_frobenius_norms,
    jacobian_spectral_norms,
    layer_jacobian,
    load,
    loads,
    network_jacobian,
    pool_regions_2d,
    predict,
    quadrature_weights,
    random_network,
    resnet_jacobian_expansion,
    save,
    softmax,
    softmax_jacobian,
    switching_distance,
)


def central_difference(f, x, h=1e-5):
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=1)


def away_from_kinks(net, rng, guard=1e-4):
    while True:
        x = rng.standard_normal(net.input_dim)
        if switching_distance(net, x)[0] > guard:
            return x


class TestForward:
    def test_identity_linear_network(self):
        net = NetworkSpec((LinearHead(np.eye(2), np.zeros(2)),))
        np.testing.assert_array_equal(predict(net, [1.0, 2.0]), [1.0, 2.0])

    def test_symmetric_softmax(self):
        net = NetworkSpec((SoftmaxHead(np.zeros((2, 3)), np.zeros(2)),))
        np.testing.assert_allclose(predict(net, [1.0, -2.0, 3.0]), [0.5, 0.5])

    def test_hand_evaluated_relu_net(self):
        # hidden pre-activation (-1, 1) -> ReLU (0, 1) -> head (2.5, -1)
        net = NetworkSpec((
            Dense(np.array([[1.0, -1.0], [2.0, 0.0]]), np.array([0.0, -1.0]), "relu"),
            LinearHead(np.array([[1.0, 2.0], [3.0, -1.0]]), np.array([0.5, 0.0])),
        ))
        tr = forward(net, np.array([1.0, 2.0]))
        np.testing.assert_array_equal(tr.preactivations[1], [-1.0, 1.0])
        np.testing.assert_array_equal(tr.activations[1], [0.0, 1.0])
        np.testing.assert_array_equal(tr.output, [2.5, -1.0])

    def test_trace_lengths_and_softmax_simplex(self):
        rng = np.random.default_rng(0)
        net = random_network(rng, 6, [8, 8], 4, "tanh", pool_after=0)
        tr = forward(net, rng.standard_normal(6))
        assert len(tr.activations) == len(net.layers) + 1
        assert np.all(tr.output > 0) and abs(tr.output.sum() - 1) < 1e-12

    def test_max_pool_selection_attains_region_max(self):
        rng = np.random.default_rng(1)
        net = random_network(rng, 5, [12], 3, "tanh", pool_after=0, pool_kind="max")
        tr = forward(net, rng.standard_normal(5))
        pool_idx = next(i for i, l in enumerate(net.layers) if isinstance(l, Pooling))
        sel = tr.pool_selections[pool_idx + 1]
        z = tr.activations[pool_idx]  # input of the pooling layer
        for region, j in zip(net.layers[pool_idx].regions, sel):
            assert abs(z[j]) == max(abs(z[i]) for i in region)

    def test_max_pool_tie_goes_to_lowest_index(self):
        pool = Pooling("max", ((0, 1, 2),), 3)
        np.testing.assert_array_equal(pool.matrix(np.array([2.0, -2.0, 1.0])), [[1.0, 0.0, 0.0]])

    def test_max_pool_uses_magnitude(self):
        pool = Pooling("max", ((0, 1),), 2)
        np.testing.assert_array_equal(pool.matrix(np.array([1.0, -3.0])), [[0.0, 1.0]])

    def test_dimension_mismatch(self):
        net = init_mlp([3, 4, 2], rng=0)
        with pytest.raises(InvalidInputError):
            forward(net, np.zeros(4))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(2)
        net = random_network(rng, 4, [6, 6], 3, "sigmoid", residual_at=0)
        X = rng.standard_normal((5, 4))
        batch = predict(net, X)
        for i in range(5):
            np.testing.assert_allclose(batch[i], forward(net, X[i]).output, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("layers", [
        (Dense(np.eye(2), np.zeros(2)),),
        (SoftmaxHead(np.eye(2), np.zeros(2)), SoftmaxHead(np.eye(2), np.zeros(2))),
        (Dense(np.eye(3), np.zeros(3)), LinearHead(np.eye(2), np.zeros(2))),
    ])
    def test_invalid_architectures(self, layers):
        with pytest.raises(InvalidInputError):
            NetworkSpec(layers)

    def test_overlapping_pool_regions_rejected(self):
        with pytest.raises(InvalidInputError):
            Pooling("max", ((0, 1), (1, 2)), 3)

    def test_residual_must_preserve_dimension(self):
        with pytest.raises(InvalidInputError):
            Residual((Dense(np.ones((2, 3)), np.zeros(2)),))


class TestLayerJacobian:
    def test_linear_head_is_weight(self):
        W = np.random.default_rng(0).standard_normal((3, 4))
        np.testing.assert_array_equal(layer_jacobian(LinearHead(W, np.ones(3)), np.ones(4)), W)

    def test_softmax_part_at_zero(self):
        np.testing.assert_allclose(softmax_jacobian(np.zeros(2)), [[0.25, -0.25], [-0.25, 0.25]])

    def test_sigmoid_layer_at_zero(self):
        W = np.random.default_rng(1).standard_normal((3, 3))
        J = layer_jacobian(Dense(W, np.zeros(3), "sigmoid"), np.zeros(3))
        np.testing.assert_allclose(J, 0.25 * W, rtol=0, atol=1e-15)

    def test_relu_derivative_zero_at_kink(self):
        layer = Dense(np.eye(2), np.zeros(2), "relu")
        np.testing.assert_array_equal(layer_jacobian(layer, np.array([0.0, 1.0])), [[0.0, 0.0], [0.0, 1.0]])

    @pytest.mark.parametrize("act", ["relu", "sigmoid", "tanh", "identity"])
    def test_dense_against_finite_differences(self, act):
        rng = np.random.default_rng(3)
        layer = Dense(rng.standard_normal((5, 4)), rng.standard_normal(5), act)
        net = NetworkSpec((layer, LinearHead(np.eye(5), np.zeros(5))))
        x = away_from_kinks(net, rng)
        fd = central_difference(lambda v: predict(net, v), x)
        np.testing.assert_allclose(layer_jacobian(layer, x), fd, rtol=1e-5, atol=1e-8)

    def test_softmax_head_against_finite_differences(self):
        rng = np.random.default_rng(4)
        head = SoftmaxHead(rng.standard_normal((4, 3)), rng.standard_normal(4))
        x = rng.standard_normal(3)
        fd = central_difference(lambda v: softmax(head.W @ v + head.b), x)
        np.testing.assert_allclose(layer_jacobian(head, x), fd, rtol=1e-6, atol=1e-9)


class TestNetworkJacobian:
    def test_identity_network(self):
        net = NetworkSpec((Dense(np.eye(3), np.zeros(3), "identity"), LinearHead(np.eye(3), np.zeros(3))))
        np.testing.assert_array_equal(network_jacobian(net, np.array([1.0, -2.0, 0.5])), np.eye(3))

    def test_dead_relu_layer_gives_zero(self):
        net = NetworkSpec((Dense(np.eye(3), -10 * np.ones(3), "relu"), LinearHead(np.ones((2, 3)), np.zeros(2))))
        np.testing.assert_array_equal(network_jacobian(net, np.ones(3)), np.zeros((2, 3)))

    @pytest.mark.parametrize("seed", range(12))
    def test_against_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        act = ("relu", "sigmoid", "tanh")[seed % 3]
        net = random_network(
            rng, 5, [7, 8], 3, act,
            pool_after=0 if seed % 2 else None,
            pool_kind=("max", "average", "downsample")[seed % 3],
            residual_at=1 if seed % 4 == 1 else None,
        )
        x = away_from_kinks(net, rng)
        fd = central_difference(lambda v: predict(net, v), x)
        J = network_jacobian(net, x)
        assert np.max(np.abs(J - fd)) <= 1e-5 * max(np.max(np.abs(fd)), 1e-12)

    def test_batched_rows_match_product_form(self):
        rng = np.random.default_rng(7)
        net = random_network(rng, 6, [10, 8], 4, "tanh", pool_after=0, residual_at=1)
        X = rng.standard_normal((9, 6))
        Js = batch_jacobians(net, X)
        for i in range(9):
            np.testing.assert_allclose(Js[i], network_jacobian(net, X[i]), rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(jacobian_spectral_norms(net, X), [small_spectral_norm(J) for J in Js], rtol=1e-12)
        np.testing.assert_allclose(jacobian_frobenius_norms(net, X), np.linalg.norm(Js, axis=(1, 2)), rtol=1e-12)

    def test_selected_rows(self):
        rng = np.random.default_rng(8)
        net = random_network(rng, 4, [5], 3, "sigmoid")
        X = rng.standard_normal((2, 4))
        E = np.zeros((2, 1, 3))
        E[0, 0, 2] = E[1, 0, 0] = 1.0
        rows = batch_jacobians(net, X, rows=E)
        full = batch_jacobians(net, X)
        np.testing.assert_allclose(rows[:, 0], [full[0, 2], full[1, 0]], rtol=1e-13)


class TestAverageJacobian:
    def test_linear_network_any_steps(self):
        rng = np.random.default_rng(0)
        W = rng.standard_normal((3, 4))
        net = NetworkSpec((LinearHead(W, rng.standard_normal(3)),))
        x, x2 = rng.standard_normal(4), rng.standard_normal(4)
        for steps in (2, 3, 7, 64):
            for rule in ("trapezoid", "simpson"):
                Jbar = average_jacobian(net, x, x2, steps, rule)
                np.testing.assert_allclose(Jbar, W, rtol=0, atol=1e-14)
                resid = predict(net, x2) - predict(net, x) - Jbar @ (x2 - x)
                assert np.linalg.norm(resid) <= 1e-12 * np.linalg.norm(x2 - x)

    def test_zero_length_segment(self):
        rng = np.random.default_rng(1)
        net = random_network(rng, 3, [5], 2, "tanh")
        x = rng.standard_normal(3)
        np.testing.assert_allclose(average_jacobian(net, x, x), network_jacobian(net, x), rtol=1e-13, atol=1e-15)

    def test_steps_below_two(self):
        net = init_mlp([2, 2], rng=0)
        with pytest.raises(InvalidInputError):
            average_jacobian(net, np.zeros(2), np.ones(2), steps=1)

    def test_unknown_rule(self):
        with pytest.raises(InvalidInputError):
            quadrature_weights(4, "gauss")

    @pytest.mark.parametrize("steps", range(2, 12))
    def test_simpson_weights_exact_for_cubics(self, steps):
        w = quadrature_weights(steps, "simpson")
        t = np.linspace(0, 1, steps + 1)
        for p in range(4):
            assert abs(w @ t**p - 1.0 / (p + 1)) < 1e-14

    def test_smooth_identity_at_64_panels(self):
        rng = np.random.default_rng(2)
        for i in range(20):
            net = random_network(rng, 4, [16, 16], 3, ("sigmoid", "tanh")[i % 2])
            x, x2 = rng.standard_normal(4), rng.standard_normal(4)
            resid = predict(net, x2) - predict(net, x) - average_jacobian(net, x, x2) @ (x2 - x)
            assert np.linalg.norm(resid) <= 1e-6 * np.linalg.norm(x2 - x)

    def test_relu_refinement_first_order(self):
        # Per pair the error jumps with where kinks fall between nodes; averaged over pairs it
        # halves per doubling of the panel count (fitted order about 1).
        rng = np.random.default_rng(1)
        steps = (16, 32, 64, 128, 256, 512)
        res = []
        for _ in range(100):
            net = random_network(rng, 4, [16, 16], 3, "relu")
            x, x2 = rng.standard_normal(4), rng.standard_normal(4)
            d = predict(net, x2) - predict(net, x)
            res.append([np.linalg.norm(d - average_jacobian(net, x, x2, s) @ (x2 - x)) for s in steps])
        mean = np.mean(res, axis=0)
        order = -np.polyfit(np.log(steps), np.log(mean), 1)[0]
        assert order >= 0.95
        assert mean[-1] < mean[0] / 16


class TestDistanceExpansion:
    @pytest.mark.parametrize("act", ["relu", "sigmoid", "tanh"])
    def test_bounded_by_max_segment_jacobian(self, act):
        rng = np.random.default_rng(11)
        for _ in range(15):
            net = random_network(rng, 3, [10, 10], 3, act)
            x, x2 = rng.standard_normal(3), rng.standard_normal(3)
            seg = x + np.linspace(0, 1, 200)[:, None] * (x2 - x)
            lhs = np.linalg.norm(predict(net, x2) - predict(net, x))
            assert lhs <= (np.max(jacobian_spectral_norms(net, seg)) + 1e-8) * np.linalg.norm(x2 - x)


class TestLayerNormBounds:
    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=2, max_size=10))
    def test_softmax_jacobian_norm_at_most_one(self, logits):
        assert small_spectral_norm(softmax_jacobian(np.array(logits))) <= 1 + 1e-8

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**6), st.sampled_from(["relu", "sigmoid", "tanh"]))
    def test_dense_layer_bounded_by_weight_norm(self, seed, act):
        rng = np.random.default_rng(seed)
        W = rng.standard_normal(tuple(rng.integers(1, 12, size=2)))
        layer = Dense(W, rng.standard_normal(W.shape[0]), act)
        n = small_spectral_norm(layer_jacobian(layer, 3 * rng.standard_normal(W.shape[1])))
        bound = (0.25 if act == "sigmoid" else 1.0) * small_spectral_norm(W)
        assert n <= bound + 1e-8

    @pytest.mark.parametrize("kind", ["downsample", "max", "average"])
    def test_pooling_norm(self, kind):
        regions = pool_regions_2d(2, 4, 4, 2)
        pool = Pooling(kind, regions, 32)
        n = small_spectral_norm(layer_jacobian(pool, np.random.default_rng(0).standard_normal(32)))
        if kind == "average":
            assert n == pytest.approx(0.5, abs=1e-12)
        else:
            assert n == pytest.approx(1.0, abs=1e-12)


def _residual_net(rng, blocks, act="tanh", dead=False):
    layers = []
    for _ in range(blocks):
        b = -100 * np.ones(4) if dead else 0.1 * rng.standard_normal(4)
        layers.append(Residual((Dense(rng.standard_normal((4, 4)), b, act),)))
    layers.append(SoftmaxHead(rng.standard_normal((3, 4)), np.zeros(3)))
    return NetworkSpec(tuple(layers))


class TestResnetExpansion:
    def test_dead_inner_block(self):
        rng = np.random.default_rng(0)
        net = _residual_net(rng, 1, "relu", dead=True)
        x = rng.standard_normal(4)
        np.testing.assert_allclose(resnet_jacobian_expansion(net, x), layer_jacobian(net.head, x), atol=1e-15)

    def test_one_block(self):
        rng = np.random.default_rng(1)
        net = _residual_net(rng, 1)
        x = rng.standard_normal(4)
        inner = layer_jacobian(net.layers[0].inner[0], x)
        z1 = forward(net, x).activations[1]
        expect = layer_jacobian(net.head, z1) @ (np.eye(4) + inner)
        np.testing.assert_allclose(resnet_jacobian_expansion(net, x), expect, atol=1e-13)

    def test_two_blocks_four_paths(self):
        rng = np.random.default_rng(2)
        net = _residual_net(rng, 2, "sigmoid")
        x = rng.standard_normal(4)
        tr = forward(net, x)
        J1 = layer_jacobian(net.layers[0].inner[0], tr.activations[0])
        J2 = layer_jacobian(net.layers[1].inner[0], tr.activations[1])
        expect = layer_jacobian(net.head, tr.activations[2]) @ (np.eye(4) + J1 + J2 + J2 @ J1)
        np.testing.assert_allclose(resnet_jacobian_expansion(net, x), expect, atol=1e-13)

    @pytest.mark.parametrize("blocks", [1, 2, 3, 4])
    def test_matches_product_form(self, blocks):
        rng = np.random.default_rng(blocks)
        net = _residual_net(rng, blocks)
        x = rng.standard_normal(4)
        np.testing.assert_allclose(resnet_jacobian_expansion(net, x), network_jacobian(net, x), rtol=0, atol=1e-10)

    def test_rejects_plain_net(self):
        with pytest.raises(UnsupportedArchitectureError):
            resnet_jacobian_expansion(init_mlp([3, 4, 2], rng=0), np.zeros(3))


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        net = random_network(rng, 6, [8, 8], 3, "tanh", pool_after=0, pool_kind="average", residual_at=1)
        path = tmp_path / "net.json"
        save(net, path)
        back = load(path)
        for a, b in zip(net.parameters(), back.parameters()):
            assert a.shape == b.shape and np.array_equal(a, b)
        X = rng.standard_normal((4, 6))
        assert np.array_equal(predict(net, X), predict(back, X))
        assert dumps(back) == dumps(net)

    def test_rejects_other_version(self):
        text = dumps(init_mlp([2, 2], rng=0)).replace('"version": 1', '"version": 9')
        with pytest.raises(InvalidInputError):
            loads(text)

    def test_classify_argmax(self):
        net = NetworkSpec((LinearHead(np.eye(3), np.zeros(3)),))
        np.testing.assert_array_equal(classify(net, np.array([[0.0, 2.0, 1.0], [5.0, 0.0, 0.0]])), [1, 0])


def test_switching_distance_linear_net_is_infinite():
    net = NetworkSpec((LinearHead(np.eye(2), np.zeros(2)),))
    assert math.isinf(switching_distance(net, np.ones(2))[0])
