import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_differences, mean_loss, random_data, random_network, relative_error
from mbf.errors import InvalidInputError, ShapeError
from mbf.nn import (
    LayerSpec,
    NetworkSpec,
    Params,
    backward,
    forward,
    init_params,
    jacobian,
    loss_and_gradients,
    loss_eval,
    mlp,
    per_sample_gradients,
    per_sample_loss,
)


def direct_conv(x, w, b, R):
    """Zero-padded stride-1 correlation with explicit loops: x (J,H,W), w (J,I,k,k)."""
    J, H, W = x.shape
    I = w.shape[1]
    pad = np.zeros((J, H + 2 * R, W + 2 * R))
    pad[:, R:R + H, R:R + W] = x
    out = np.zeros((I, H, W))
    for i in range(I):
        for r in range(H):
            for c in range(W):
                out[i, r, c] = np.sum(pad[:, r:r + 2 * R + 1, c:c + 2 * R + 1] * w[:, i])
        if b is not None:
            out[i] += b[i]
    return out


class TestSpecs:
    def test_dense_shapes(self):
        layer = LayerSpec.dense(784, 1000)
        assert layer.weight_shape == (784, 1000)
        assert layer.n_params == 784 * 1000 + 1000

    def test_conv_shapes(self):
        layer = LayerSpec.conv2d(3, 2, 1, 5, 4)
        assert layer.weight_shape == (3, 2, 3, 3)
        assert layer.taps == 9
        assert layer.output_size == 2 * 20

    def test_incompatible_layers(self):
        with pytest.raises(ValueError):
            NetworkSpec((LayerSpec.dense(4, 3), LayerSpec.dense(5, 2)), "squared_error")

    def test_bad_dims(self):
        with pytest.raises(InvalidInputError):
            LayerSpec.dense(0, 3)
        with pytest.raises(InvalidInputError):
            LayerSpec.dense(2, 3, activation="gelu")

    def test_flat_round_trip(self, rng):
        spec = random_network(rng)
        p = init_params(spec, 3)
        q = Params.from_flat(spec, p.flat())
        np.testing.assert_array_equal(q.flat(), p.flat())
        with pytest.raises(ShapeError):
            Params.from_flat(spec, np.zeros(spec.n_params + 1))


class TestInit:
    def test_deterministic(self):
        spec = mlp([5, 4, 3])
        a, b = init_params(spec, 7), init_params(spec, 7)
        np.testing.assert_array_equal(a.flat(), b.flat())

    def test_biases_zero(self):
        p = init_params(mlp([5, 4, 3]), 0)
        assert all(np.all(b == 0) for b in p.biases)

    def test_he_variance(self):
        fan_in = 100
        spec = NetworkSpec((LayerSpec.dense(fan_in, 100, "relu"),), "squared_error")
        w = init_params(spec, 1).weights[0]
        assert abs(w.var() / (2.0 / fan_in) - 1) < 0.2


class TestForward:
    def test_zero_relu(self):
        spec = mlp([3, 4, 2], "relu", "relu")
        p = init_params(spec, 0)
        p = Params([np.zeros_like(w) for w in p.weights], [np.zeros_like(b) for b in p.biases])
        out, _ = forward(p, spec, np.ones((5, 3)))
        np.testing.assert_array_equal(out, 0)

    def test_affine(self, rng):
        spec = mlp([3, 2], output_activation="identity")
        p = init_params(spec, 0)
        p.biases[0] = rng.standard_normal(2)
        X = rng.standard_normal((4, 3))
        out, _ = forward(p, spec, X)
        np.testing.assert_allclose(out, X @ p.weights[0] + p.biases[0], rtol=1e-14)

    def test_pointwise_kernel(self, rng):
        spec = NetworkSpec((LayerSpec.conv2d(1, 1, 0, 3, 3, bias=False),), "squared_error")
        p = Params([np.full((1, 1, 1, 1), 2.5)], [None])
        X = rng.standard_normal((2, 9))
        out, _ = forward(p, spec, X)
        np.testing.assert_allclose(out, 2.5 * X)

    def test_conv_matches_loops(self, rng):
        layer = LayerSpec.conv2d(2, 3, 1, 4, 5)
        spec = NetworkSpec((layer,), "squared_error")
        p = init_params(spec, 0)
        p.biases[0] = rng.standard_normal(3)
        X = rng.standard_normal((2, layer.input_size))
        out, _ = forward(p, spec, X)
        for s in range(2):
            oracle = direct_conv(X[s].reshape(2, 4, 5), p.weights[0], p.biases[0], 1)
            np.testing.assert_allclose(out[s], oracle.ravel(), rtol=1e-12, atol=1e-12)


class TestLosses:
    def test_squared_error_zero(self):
        z = np.arange(6.0).reshape(2, 3)
        loss, g = loss_eval("squared_error", z, z)
        assert loss == 0
        np.testing.assert_array_equal(g, 0)

    def test_bce_at_zero_logit(self):
        z = np.zeros((1, 3))
        y = np.full((1, 3), 0.5)
        np.testing.assert_allclose(per_sample_loss("bce_with_sigmoid", z, y), 3 * np.log(2))
        _, g = loss_eval("bce_with_sigmoid", z, y)
        np.testing.assert_array_equal(g, 0)

    def test_bce_target_range(self):
        with pytest.raises(InvalidInputError):
            loss_eval("bce_with_sigmoid", np.zeros((1, 2)), np.array([[0.0, 2.0]]))

    @pytest.mark.parametrize("kind", ["squared_error", "bce_with_sigmoid", "softmax_ce"])
    def test_gradient_finite_differences(self, rng, kind):
        z = rng.standard_normal((4, 3))
        y = rng.random((4, 3)) if kind != "softmax_ce" else np.eye(3)[[0, 2, 1, 1]]
        _, g = loss_eval(kind, z, y)
        f = lambda v: float(per_sample_loss(kind, v.reshape(4, 3), y).mean())
        fd = central_differences(f, z.ravel())
        np.testing.assert_allclose(g.ravel(), fd, rtol=1e-6, atol=1e-9)


class TestBackward:
    def test_zero_output_grad(self, rng):
        spec = random_network(rng)
        p = init_params(spec, 0)
        X, _ = random_data(rng, spec, 3)
        _, tape = forward(p, spec, X)
        grads = backward(p, spec, tape, np.zeros((3, spec.output_dim)))
        np.testing.assert_array_equal(grads.flat(), 0)

    def test_linear_regression_closed_form(self, rng):
        spec = mlp([4, 2], output_activation="identity")
        p = init_params(spec, 0)
        p.biases[0] = rng.standard_normal(2)
        X = rng.standard_normal((6, 4))
        Y = rng.standard_normal((6, 2))
        _, grads = loss_and_gradients(p, spec, X, Y)
        resid = X @ p.weights[0] + p.biases[0] - Y
        np.testing.assert_allclose(grads.weights[0], X.T @ resid / 6, rtol=1e-13)
        np.testing.assert_allclose(grads.biases[0], resid.mean(axis=0), rtol=1e-13)

    def test_three_layer_finite_differences(self, rng):
        spec = mlp([3, 5, 4, 2], "tanh")
        p = init_params(spec, 1)
        X, Y = random_data(rng, spec, 5)
        _, grads = loss_and_gradients(p, spec, X, Y)
        fd = central_differences(lambda v: mean_loss(Params.from_flat(spec, v), spec, X, Y), p.flat())
        assert relative_error(grads.flat(), fd).max() <= 1e-6


class TestPerSample:
    def test_single_sample(self, rng):
        spec = random_network(rng)
        p = init_params(spec, 0)
        X, Y = random_data(rng, spec, 1)
        _, grads = loss_and_gradients(p, spec, X, Y, per_sample=True)
        np.testing.assert_allclose(np.concatenate(grads.per_sample, axis=1)[0], grads.flat(),
                                   rtol=1e-13, atol=1e-15)

    def test_rows_match_finite_differences(self, rng):
        spec = random_network(rng, max_params=300)
        p = init_params(spec, 0)
        X, Y = random_data(rng, spec, 3)
        out, tape = forward(p, spec, X)
        _, g = loss_eval(spec.loss, out, Y)
        J = jacobian(p, spec, tape, 3 * g)
        for i in range(3):
            f = lambda v: mean_loss(Params.from_flat(spec, v), spec, X[i:i + 1], Y[i:i + 1])
            fd = central_differences(f, p.flat())
            assert relative_error(J[i], fd, floor=1e-7).max() <= 1e-6

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 9))
    def test_mean_of_rows_is_batch_gradient(self, seed, n):
        rng = np.random.default_rng(seed)
        spec = random_network(rng, max_params=600)
        p = init_params(spec, seed)
        X, Y = random_data(rng, spec, n)
        _, grads = loss_and_gradients(p, spec, X, Y, per_sample=True)
        rows = np.concatenate(grads.per_sample, axis=1)
        np.testing.assert_allclose(rows.mean(axis=0), grads.flat(), rtol=0, atol=1e-12)

    def test_block_layout(self, rng):
        spec = random_network(rng)
        p = init_params(spec, 0)
        X, Y = random_data(rng, spec, 4)
        out, tape = forward(p, spec, X)
        blocks = per_sample_gradients(p, spec, tape, np.ones_like(out))
        assert [b.shape for b in blocks] == [(4, l.n_params) for l in spec.layers]
