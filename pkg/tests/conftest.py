import numpy as np
import pytest

from mbf.nn import LayerSpec, NetworkSpec, Params, forward, init_params, loss_eval, per_sample_loss

ACTS = ("relu", "tanh", "sigmoid")


def random_network(rng, max_params=2000, allow_conv=True, loss=None):
    """A small random dense/conv network and matching random data."""
    while True:
        layers = []
        if allow_conv and rng.random() < 0.5:
            side = int(rng.integers(3, 6))
            J = int(rng.integers(1, 3))
            I = int(rng.integers(1, 4))
            R = int(rng.integers(0, 2))
            layers.append(LayerSpec.conv2d(J, I, R, side, side, str(rng.choice(ACTS)),
                                           bias=bool(rng.random() < 0.8)))
            if rng.random() < 0.5:
                layers.append(LayerSpec.conv2d(I, int(rng.integers(1, 3)), int(rng.integers(0, 2)),
                                               side, side, str(rng.choice(ACTS))))
            width = layers[-1].output_size
        else:
            width = int(rng.integers(2, 8))
            layers.append(LayerSpec.dense(width, int(rng.integers(2, 8)), str(rng.choice(ACTS)),
                                          bias=bool(rng.random() < 0.8)))
            width = layers[-1].n_out
        for _ in range(int(rng.integers(0, 2))):
            out = int(rng.integers(2, 7))
            layers.append(LayerSpec.dense(width, out, str(rng.choice(ACTS))))
            width = out
        kind = loss or str(rng.choice(["squared_error", "bce_with_sigmoid", "softmax_ce"]))
        layers.append(LayerSpec.dense(width, int(rng.integers(1, 4)) if kind != "softmax_ce"
                                      else int(rng.integers(2, 4)), "identity"))
        spec = NetworkSpec(tuple(layers), kind)
        if spec.n_params <= max_params:
            return spec


def random_data(rng, spec, n):
    X = rng.standard_normal((n, spec.input_dim))
    k = spec.output_dim
    if spec.loss == "squared_error":
        Y = rng.standard_normal((n, k))
    elif spec.loss == "bce_with_sigmoid":
        Y = rng.random((n, k))
    else:
        Y = np.eye(k)[rng.integers(0, k, n)]
    return X, Y


def mean_loss(params, spec, X, Y):
    out, _ = forward(params, spec, X)
    return float(per_sample_loss(spec.loss, out, Y).mean())


def central_differences(f, x, rel_step=1e-5, order=2, pattern=None, min_step=1e-9):
    """Central differences of a scalar function, step ``rel_step * max(1, |x_i|)``.

    ``order=4`` uses the five-point stencil, which tolerates a larger step and
    so loses less to cancellation when a component is small. ``pattern(x)``
    returns the on/off state of every piecewise-linear unit; a coordinate's
    step is cut tenfold until no stencil point changes that state, so the
    stencil never straddles a kink.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    base = None if pattern is None else pattern(x)
    g = np.zeros_like(x)
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        offsets = (h, -h) if order == 2 else (h, -h, 2 * h, -2 * h)
        while pattern is not None:
            points = []
            for t in offsets:
                xt = x.copy()
                xt[i] += t
                points.append(xt)
            if all(np.array_equal(pattern(xt), base) for xt in points):
                break
            h /= 10.0
            if h < min_step:
                raise ValueError(f"coordinate {i} sits on a kink")
            offsets = tuple(t / 10.0 for t in offsets)

        def at(t):
            xt = x.copy()
            xt[i] += t
            return f(xt)

        if order == 2:
            g[i] = (at(h) - at(-h)) / (2 * h)
        else:
            g[i] = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)
    return g


def relu_pattern(spec, X):
    """Sign pattern of every ReLU pre-activation, as a function of the flat parameters."""
    def pattern(w):
        _, tape = forward(Params.from_flat(spec, w), spec, X)
        return np.concatenate([(z > 0).ravel() for z, layer in zip(tape.preacts, spec.layers)
                               if layer.activation == "relu"] + [np.zeros(0, bool)])

    return pattern


def relative_error(a, b, floor=1e-8):
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
