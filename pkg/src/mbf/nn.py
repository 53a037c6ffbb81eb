"""A small reverse-mode training core: dense and 2-D convolutional layers.

Layout conventions
------------------
* Network inputs and every layer's activations are ``(n, size)`` matrices.
  Convolutional activations are flattened channel-major (``c, y, x``).
* Dense weights are ``(in_dim, out_dim)`` so that ``h = a @ W + b``.
* Conv weights are ``(in_channels, out_channels, k, k)`` with ``k = 2R + 1``,
  stride 1 and padding ``R``, so the output grid equals the input grid.
* A layer's flat parameter vector is ``W.ravel()`` followed by ``b``. For a
  dense layer this coincides with the C-order ravel of the bias-augmented
  ``(in_dim + 1, out_dim)`` matrix ``[W; b]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidInputError, ShapeError

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")
LOSSES = ("squared_error", "bce_with_sigmoid", "softmax_ce")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    n_in: int  # dense: input dim I; conv2d: input channels J
    n_out: int  # dense: output dim O; conv2d: output channels I
    activation: str = "identity"
    bias: bool = True
    radius: int = 0
    height: int = 1
    width: int = 1

    @classmethod
    def dense(cls, in_dim, out_dim, activation="identity", bias=True):
        return cls("dense", in_dim, out_dim, activation, bias)

    @classmethod
    def conv2d(cls, in_channels, out_channels, radius, height, width,
               activation="identity", bias=True):
        return cls("conv2d", in_channels, out_channels, activation, bias, radius, height, width)

    def __post_init__(self):
        if self.kind not in ("dense", "conv2d"):
            raise InvalidInputError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        if min(self.n_in, self.n_out, self.height, self.width) < 1 or self.radius < 0:
            raise InvalidInputError(f"layer dimensions must be >= 1: {self}")
        if self.kind == "dense" and (self.radius, self.height, self.width) != (0, 1, 1):
            raise InvalidInputError("dense layers take no spatial arguments")

    @property
    def is_conv(self) -> bool:
        return self.kind == "conv2d"

    @property
    def kernel(self) -> int:
        return 2 * self.radius + 1

    @property
    def taps(self) -> int:
        """Number of kernel offsets, ``|Delta| = (2R+1)^2``."""
        return self.kernel ** 2

    @property
    def positions(self) -> int:
        return self.height * self.width

    @property
    def input_size(self) -> int:
        return self.n_in * self.positions

    @property
    def output_size(self) -> int:
        return self.n_out * self.positions

    @property
    def weight_shape(self) -> tuple:
        if self.is_conv:
            return (self.n_in, self.n_out, self.kernel, self.kernel)
        return (self.n_in, self.n_out)

    @property
    def n_weights(self) -> int:
        return int(np.prod(self.weight_shape))

    @property
    def n_params(self) -> int:
        return self.n_weights + (self.n_out if self.bias else 0)

    def fans(self):
        if self.is_conv:
            return self.n_in * self.taps, self.n_out * self.taps
        return self.n_in, self.n_out


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    loss: str = "squared_error"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise InvalidInputError("a network needs at least one layer")
        if self.loss not in LOSSES:
            raise InvalidInputError(f"unknown loss {self.loss!r}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.output_size != nxt.input_size:
                raise ShapeError(
                    f"layer output size {prev.output_size} does not match "
                    f"next layer input size {nxt.input_size}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_size

    @property
    def output_dim(self) -> int:
        return self.layers[-1].output_size

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    def offsets(self) -> List[int]:
        """Start index of each layer in the flat parameter vector (plus the end)."""
        return list(np.cumsum([0] + [layer.n_params for layer in self.layers]))


def mlp(widths: Sequence[int], activation="tanh", output_activation="identity",
        loss="squared_error", bias=True) -> NetworkSpec:
    """Fully-connected network with the given layer widths, e.g. ``[784, 64, 10]``."""
    layers = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        act = output_activation if i == len(widths) - 2 else activation
        layers.append(LayerSpec.dense(a, b, act, bias))
    return NetworkSpec(tuple(layers), loss)


@dataclass
class Params:
    weights: List[np.ndarray]
    biases: List[Optional[np.ndarray]]

    def copy(self) -> "Params":
        return Params([w.copy() for w in self.weights],
                      [None if b is None else b.copy() for b in self.biases])

    def layer_flat(self, l) -> np.ndarray:
        parts = [self.weights[l].ravel()]
        if self.biases[l] is not None:
            parts.append(self.biases[l])
        return np.concatenate(parts)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.layer_flat(l) for l in range(len(self.weights))])

    @classmethod
    def from_flat(cls, spec: NetworkSpec, vec) -> "Params":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (spec.n_params,):
            raise ShapeError(f"expected {spec.n_params} parameters, got {vec.shape}")
        weights, biases = [], []
        start = 0
        for layer in spec.layers:
            weights.append(vec[start:start + layer.n_weights].reshape(layer.weight_shape).copy())
            start += layer.n_weights
            if layer.bias:
                biases.append(vec[start:start + layer.n_out].copy())
                start += layer.n_out
            else:
                biases.append(None)
        return cls(weights, biases)


@dataclass
class Tape:
    """Per-layer quantities recorded by :func:`forward`.

    ``inputs[l]`` is the activation entering layer ``l`` (``n x input_size``);
    ``cols[l]`` holds the unfolded patches ``(n, positions, J*k*k)`` for conv
    layers; ``preacts[l]`` is ``(n, O)`` for dense and ``(n, positions, I)``
    for conv layers.
    """

    inputs: List[np.ndarray]
    preacts: List[np.ndarray]
    cols: List[Optional[np.ndarray]]

    @property
    def batch_size(self) -> int:
        return self.inputs[0].shape[0]


@dataclass
class Gradients:
    """Mean gradients plus the per-layer quantities curvature methods reuse.

    ``deltas[l]`` is the derivative of the *mean* loss with respect to layer
    ``l``'s pre-activations; multiply by ``n`` for per-sample derivatives.
    """

    weights: List[np.ndarray]
    biases: List[Optional[np.ndarray]]
    deltas: List[np.ndarray] = field(default_factory=list)
    inputs: List[np.ndarray] = field(default_factory=list)
    per_sample: Optional[List[np.ndarray]] = None

    def layer_flat(self, l) -> np.ndarray:
        parts = [self.weights[l].ravel()]
        if self.biases[l] is not None:
            parts.append(self.biases[l])
        return np.concatenate(parts)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.layer_flat(l) for l in range(len(self.weights))])


def init_params(spec: NetworkSpec, seed: int) -> Params:
    """He-uniform weights for relu layers, Glorot-uniform otherwise; zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for layer in spec.layers:
        fan_in, fan_out = layer.fans()
        if layer.activation == "relu":
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=layer.weight_shape))
        biases.append(np.zeros(layer.n_out) if layer.bias else None)
    return Params(weights, biases)


# -- activations ---------------------------------------------------------

def _activate(kind, h):
    if kind == "relu":
        return np.maximum(h, 0.0)
    if kind == "tanh":
        return np.tanh(h)
    if kind == "sigmoid":
        return _sigmoid(h)
    return h


def _activation_grad(kind, h):
    if kind == "relu":
        return (h > 0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - np.tanh(h) ** 2
    if kind == "sigmoid":
        s = _sigmoid(h)
        return s * (1.0 - s)
    return np.ones_like(h)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# -- convolution by patch unfolding ------------------------------------------

def unfold(x, layer: LayerSpec) -> np.ndarray:
    """``(n, J*H*W)`` activations -> ``(n, H*W, J*k*k)`` zero-padded patches."""
    n = x.shape[0]
    R, k = layer.radius, layer.kernel
    img = x.reshape(n, layer.n_in, layer.height, layer.width)
    padded = np.pad(img, ((0, 0), (0, 0), (R, R), (R, R)))
    win = sliding_window_view(padded, (k, k), axis=(2, 3))  # n, J, H, W, k, k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, layer.positions, layer.n_in * k * k)


def fold(dcols, layer: LayerSpec) -> np.ndarray:
    """Adjoint of :func:`unfold`: scatter-add patch gradients back onto the input."""
    n = dcols.shape[0]
    R, k, H, W = layer.radius, layer.kernel, layer.height, layer.width
    d = dcols.reshape(n, H, W, layer.n_in, k, k)
    padded = np.zeros((n, layer.n_in, H + 2 * R, W + 2 * R))
    for dy in range(k):
        for dx in range(k):
            padded[:, :, dy:dy + H, dx:dx + W] += d[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
    return padded[:, :, R:R + H, R:R + W].reshape(n, layer.input_size)


def _kernel_matrix(w, layer):
    # (J, I, k, k) -> (J*k*k, I), rows ordered like the unfolded patch columns
    return w.transpose(0, 2, 3, 1).reshape(layer.n_in * layer.taps, layer.n_out)


# -- passes ------------------------------------------------------------------

def forward(params: Params, spec: NetworkSpec, X):
    """Run the network on ``X`` (``n x input_dim``); return ``(outputs, tape)``."""
    a = np.asarray(X, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != spec.input_dim:
        raise ShapeError(f"input must be (n, {spec.input_dim}), got {a.shape}")
    inputs, preacts, cols = [], [], []
    for l, layer in enumerate(spec.layers):
        w, b = params.weights[l], params.biases[l]
        if w.shape != layer.weight_shape:
            raise ShapeError(f"layer {l} weight shape {w.shape} != {layer.weight_shape}")
        inputs.append(a)
        if layer.is_conv:
            c = unfold(a, layer)
            h = c @ _kernel_matrix(w, layer)
            if b is not None:
                h = h + b
            cols.append(c)
            preacts.append(h)
            a = _activate(layer.activation, h).transpose(0, 2, 1).reshape(a.shape[0], -1)
        else:
            h = a @ w
            if b is not None:
                h = h + b
            cols.append(None)
            preacts.append(h)
            a = _activate(layer.activation, h)
    return a, Tape(inputs, preacts, cols)


def _check_tape(spec, tape, output_grad):
    if len(tape.inputs) != len(spec.layers):
        raise ShapeError("tape does not match the network depth")
    n = tape.batch_size
    for l, layer in enumerate(spec.layers):
        if tape.inputs[l].shape != (n, layer.input_size):
            raise ShapeError(f"stale tape: layer {l} input shape {tape.inputs[l].shape}")
    if output_grad.shape != (n, spec.output_dim):
        raise ShapeError(
            f"output gradient must be ({n}, {spec.output_dim}), got {output_grad.shape}"
        )


def backprop_deltas(params: Params, spec: NetworkSpec, tape: Tape, output_grad) -> List[np.ndarray]:
    """Derivatives of the loss w.r.t. every layer's pre-activations."""
    g = np.asarray(output_grad, dtype=np.float64)
    _check_tape(spec, tape, g)
    n = tape.batch_size
    deltas = [None] * len(spec.layers)
    for l in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[l]
        h = tape.preacts[l]
        if layer.is_conv:
            g = g.reshape(n, layer.n_out, layer.positions).transpose(0, 2, 1)
        delta = g * _activation_grad(layer.activation, h)
        deltas[l] = delta
        if l == 0:
            break
        if layer.is_conv:
            g = fold(delta @ _kernel_matrix(params.weights[l], layer).T, layer)
        else:
            g = delta @ params.weights[l].T
    return deltas


def backward(params: Params, spec: NetworkSpec, tape: Tape, output_grad) -> Gradients:
    """Gradients of the loss whose derivative w.r.t. the outputs is ``output_grad``.

    When ``output_grad`` comes from :func:`loss_eval` these are the mean
    gradients over the batch.
    """
    deltas = backprop_deltas(params, spec, tape, output_grad)
    dW, db = [], []
    for l, layer in enumerate(spec.layers):
        delta = deltas[l]
        if layer.is_conv:
            gm = np.einsum("ntk,nti->ki", tape.cols[l], delta)
            k = layer.kernel
            dW.append(gm.reshape(layer.n_in, k, k, layer.n_out).transpose(0, 3, 1, 2))
            db.append(delta.sum(axis=(0, 1)) if layer.bias else None)
        else:
            dW.append(tape.inputs[l].T @ delta)
            db.append(delta.sum(axis=0) if layer.bias else None)
    return Gradients(dW, db, deltas, list(tape.inputs))


def per_sample_gradients(params: Params, spec: NetworkSpec, tape: Tape,
                         per_sample_output_grads) -> List[np.ndarray]:
    """Per-layer Jacobian blocks: row ``i`` of entry ``l`` is sample ``i``'s gradient.

    ``per_sample_output_grads[i]`` is the derivative of sample ``i``'s own loss
    with respect to its outputs (that is, ``n`` times the mean-loss gradient).
    Rows follow the flat per-layer layout ``W.ravel()`` then ``b``.
    """
    deltas = backprop_deltas(params, spec, tape, per_sample_output_grads)
    n = tape.batch_size
    blocks = []
    for l, layer in enumerate(spec.layers):
        delta = deltas[l]
        if layer.is_conv:
            k = layer.kernel
            gw = np.einsum("ntk,nti->nki", tape.cols[l], delta)
            gw = gw.reshape(n, layer.n_in, k, k, layer.n_out).transpose(0, 1, 4, 2, 3)
            parts = [gw.reshape(n, -1)]
            if layer.bias:
                parts.append(delta.sum(axis=1))
        else:
            gw = tape.inputs[l][:, :, None] * delta[:, None, :]
            parts = [gw.reshape(n, -1)]
            if layer.bias:
                parts.append(delta)
        blocks.append(np.concatenate(parts, axis=1))
    return blocks


def jacobian(params: Params, spec: NetworkSpec, tape: Tape, per_sample_output_grads) -> np.ndarray:
    """Full ``n x p`` per-sample gradient matrix."""
    return np.concatenate(per_sample_gradients(params, spec, tape, per_sample_output_grads), axis=1)


# -- losses ------------------------------------------------------------------

def per_sample_loss(kind, predictions, targets) -> np.ndarray:
    z = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if z.shape != y.shape:
        raise ShapeError(f"predictions {z.shape} and targets {y.shape} differ")
    if kind == "squared_error":
        return 0.5 * np.sum((z - y) ** 2, axis=1)
    if kind == "bce_with_sigmoid":
        if np.any((y < 0) | (y > 1)):
            raise InvalidInputError("binary cross-entropy targets must lie in [0, 1]")
        return np.sum(np.maximum(z, 0) - y * z + np.log1p(np.exp(-np.abs(z))), axis=1)
    if kind == "softmax_ce":
        shifted = z - z.max(axis=1, keepdims=True)
        log_sm = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return -np.sum(y * log_sm, axis=1)
    raise InvalidInputError(f"unknown loss {kind!r}")


def loss_eval(kind, predictions, targets):
    """Mean loss over the batch and its gradient w.r.t. ``predictions``.

    Per-sample losses: squared error ``0.5 * ||z - y||^2``; binary
    cross-entropy on logits summed over units; softmax cross-entropy.
    """
    losses = per_sample_loss(kind, predictions, targets)
    z = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    n = z.shape[0]
    if kind == "squared_error":
        grad = z - y
    elif kind == "bce_with_sigmoid":
        grad = _sigmoid(z) - y
    else:
        e = np.exp(z - z.max(axis=1, keepdims=True))
        grad = e / e.sum(axis=1, keepdims=True) - y
    return float(losses.mean()), grad / n


def loss_and_gradients(params: Params, spec: NetworkSpec, X, Y, per_sample=False):
    """Forward, loss and backward in one call: ``(loss, Gradients)``.

    With ``per_sample`` the per-layer Jacobian blocks of the per-sample losses
    are attached as ``Gradients.per_sample``.
    """
    out, tape = forward(params, spec, X)
    loss, g = loss_eval(spec.loss, out, Y)
    grads = backward(params, spec, tape, g)
    if per_sample:
        grads.per_sample = per_sample_gradients(params, spec, tape, g * tape.batch_size)
    return loss, grads


def evaluate(params: Params, spec: NetworkSpec, X, Y):
    """Mean loss and, for softmax networks, accuracy."""
    out, _ = forward(params, spec, X)
    loss = float(per_sample_loss(spec.loss, out, Y).mean())
    acc = None
    if spec.loss == "softmax_ce":
        acc = float(np.mean(out.argmax(axis=1) == np.asarray(Y).argmax(axis=1)))
    return loss, acc
