"""Curvature statistics: mini-block partitions, Fisher blocks, KFAC factors.

Indices inside a :class:`LayerPartition` are local to the layer's flat
parameter vector (``W.ravel()`` then ``b``, see :mod:`mbf.nn`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .errors import InvalidInputError, ShapeError, SizeError
from .nn import LayerSpec, NetworkSpec

SHARED_FC_THRESHOLD = 2 ** 24
EMPIRICAL_FIM_MAX_PARAMS = 3000

BLOCK_KINDS = ("conv_kernel", "conv_bias", "fc_neuron", "fc_shared")


@dataclass(frozen=True)
class Block:
    label: str
    kind: str
    indices: np.ndarray

    @property
    def size(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class LayerPartition:
    blocks: tuple
    n_params: int

    def __len__(self):
        return len(self.blocks)

    def kinds(self):
        return [b.kind for b in self.blocks]


@dataclass(frozen=True)
class MiniBlockPartition:
    layers: tuple
    offsets: tuple

    def global_blocks(self) -> List[np.ndarray]:
        return [blk.indices + off for lp, off in zip(self.layers, self.offsets) for blk in lp.blocks]

    @property
    def n_blocks(self) -> int:
        return sum(len(lp) for lp in self.layers)

    @property
    def n_params(self) -> int:
        return sum(lp.n_params for lp in self.layers)


def uses_shared_fc(layer: LayerSpec, threshold=SHARED_FC_THRESHOLD) -> bool:
    """Whether a dense layer's per-neuron blocks are too many entries to keep."""
    rows = layer.n_in + (1 if layer.bias else 0)
    return not layer.is_conv and layer.n_out * rows ** 2 > threshold


def partition_layer(layer: LayerSpec, spatial_avg=False) -> LayerPartition:
    """Split one layer's parameters into mini-blocks.

    Conv layers get one block per (input channel, output channel) kernel plus
    a single bias block. Dense layers get one block per output neuron holding
    its incoming weights and bias; with ``spatial_avg`` those blocks are
    tagged ``fc_shared`` because they share one statistics matrix.
    """
    blocks = []
    if layer.is_conv:
        J, I, taps = layer.n_in, layer.n_out, layer.taps
        for j in range(J):
            for i in range(I):
                start = (j * I + i) * taps
                blocks.append(Block(f"kernel[{j},{i}]", "conv_kernel", np.arange(start, start + taps)))
        if layer.bias:
            blocks.append(Block("bias", "conv_bias", np.arange(layer.n_weights, layer.n_params)))
    else:
        I, O = layer.n_in, layer.n_out
        kind = "fc_shared" if spatial_avg else "fc_neuron"
        for o in range(O):
            idx = list(range(o, I * O, O))
            if layer.bias:
                idx.append(I * O + o)
            blocks.append(Block(f"neuron[{o}]", kind, np.array(idx)))
    return LayerPartition(tuple(blocks), layer.n_params)


def partition_network(spec: NetworkSpec, shared_fc_threshold=SHARED_FC_THRESHOLD) -> MiniBlockPartition:
    layers = tuple(
        partition_layer(layer, uses_shared_fc(layer, shared_fc_threshold)) for layer in spec.layers
    )
    return MiniBlockPartition(layers, tuple(spec.offsets()[:-1]))


# -- gradient views ------------------------------------------------------------

def neuron_gradients(dW, db) -> np.ndarray:
    """Dense-layer gradient as ``O x (I+1)``: row ``o`` is neuron ``o``'s block."""
    rows = dW if db is None else np.vstack([dW, db[None, :]])
    return np.ascontiguousarray(rows.T)


def kernel_gradients(dW) -> np.ndarray:
    """Conv-layer kernel gradient as ``(J*I) x |Delta|``, one row per kernel block."""
    J, I, k, _ = dW.shape
    return dW.reshape(J * I, k * k)


def augment(a) -> np.ndarray:
    """Append the homogeneous (bias) coordinate to layer inputs."""
    return np.hstack([a, np.ones((a.shape[0], 1))])


# -- statistics ----------------------------------------------------------------

def exact_miniblock_fisher(jacobian_rows) -> np.ndarray:
    """``(1/n) J_b^T J_b`` for the ``n x p_b`` per-sample gradients of one block."""
    J = np.atleast_2d(np.asarray(jacobian_rows, dtype=np.float64))
    F = J.T @ J / J.shape[0]
    return 0.5 * (F + F.T)


def approx_miniblock_fisher(batch_grad_slice) -> np.ndarray:
    g = np.asarray(batch_grad_slice, dtype=np.float64).ravel()
    return np.outer(g, g)


def outer_stack(rows) -> np.ndarray:
    """Outer products of every row of a 2-D array, stacked: ``(B, d, d)``."""
    rows = np.asarray(rows, dtype=np.float64)
    return rows[:, :, None] * rows[:, None, :]


def spatial_average_fc(per_neuron_grads) -> np.ndarray:
    """``(1/O) sum_j g_j g_j^T`` over the ``O`` rows of ``per_neuron_grads``."""
    G = np.asarray(per_neuron_grads, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] < 1:
        raise ShapeError(f"expected an O x (I+1) matrix, got {G.shape}")
    S = G.T @ G / G.shape[0]
    return 0.5 * (S + S.T)


def update_stats_ema(old, new, beta) -> np.ndarray:
    old = np.asarray(old)
    new = np.asarray(new)
    if old.shape != new.shape:
        raise ShapeError(f"EMA shapes differ: {old.shape} vs {new.shape}")
    if not 0.0 <= beta <= 1.0:
        raise InvalidInputError(f"EMA factor must lie in [0, 1], got {beta}")
    return beta * old + (1.0 - beta) * new


def empirical_fim(per_sample_grads, max_params=EMPIRICAL_FIM_MAX_PARAMS) -> np.ndarray:
    """Dense ``(1/n) J^T J``; only for tiny networks."""
    J = np.atleast_2d(np.asarray(per_sample_grads, dtype=np.float64))
    if J.shape[1] > max_params:
        raise SizeError(
            f"empirical FIM over {J.shape[1]} parameters exceeds the {max_params} limit; "
            "use the mini-block statistics instead"
        )
    F = J.T @ J / J.shape[0]
    return 0.5 * (F + F.T)


def _block_ids(partition, size):
    if isinstance(partition, MiniBlockPartition):
        blocks = partition.global_blocks()
    elif isinstance(partition, LayerPartition):
        blocks = [b.indices for b in partition.blocks]
    else:
        blocks = [np.asarray(b) for b in partition]
    ids = np.full(size, -1)
    for k, idx in enumerate(blocks):
        if np.any(ids[idx] != -1):
            raise ShapeError("partition blocks overlap")
        ids[idx] = k
    if np.any(ids == -1) or sum(len(b) for b in blocks) != size:
        raise ShapeError(f"partition does not cover all {size} indices")
    return ids


def block_mass_ratio(M, partition):
    """Mean ``|M_ij|`` inside mini-blocks vs. outside, and their ratio.

    Returns ``(in_block_mean_abs, off_block_mean_abs, ratio)``; the ratio is
    ``inf`` when there is no off-block mass.
    """
    M = np.abs(np.asarray(M, dtype=np.float64))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeError(f"expected a square matrix, got {M.shape}")
    ids = _block_ids(partition, M.shape[0])
    inside = ids[:, None] == ids[None, :]
    in_mean = float(M[inside].mean())
    off_mean = float(M[~inside].mean()) if np.any(~inside) else 0.0
    ratio = np.inf if off_mean == 0.0 else in_mean / off_mean
    return in_mean, off_mean, ratio


@dataclass
class KfacFactors:
    A: np.ndarray  # (I+1) x (I+1) input second moment
    Gamma: np.ndarray  # O x O pre-activation-derivative second moment


def kfac_factors(a_aug, dh) -> KfacFactors:
    """Second moments of bias-augmented inputs and per-sample pre-activation derivatives."""
    a = np.asarray(a_aug, dtype=np.float64)
    g = np.asarray(dh, dtype=np.float64)
    if a.shape[0] != g.shape[0]:
        raise ShapeError("inputs and derivatives must have the same number of samples")
    n = a.shape[0]
    A = a.T @ a / n
    Gamma = g.T @ g / n
    return KfacFactors(0.5 * (A + A.T), 0.5 * (Gamma + Gamma.T))


@dataclass
class MiniBlockStats:
    """EMA statistics and cached damped inverses for all mini-blocks of one layer.

    ``G`` is a stack ``(B, d, d)`` (``B = 1`` for a shared dense template) or,
    for a conv bias block, a vector of second moments stored in ``diag``.
    """

    G: np.ndarray
    inverse: np.ndarray
    diag: Optional[np.ndarray] = None
    diag_inverse: Optional[np.ndarray] = None
    stats_iteration: int = 0
    inverse_iteration: int = 0

    def float_count(self) -> int:
        return int(self.G.size + (0 if self.diag is None else self.diag.size))


def layer_miniblock_fishers(layer_jacobian, partition: LayerPartition) -> List[np.ndarray]:
    """Exact Fisher of every block of a layer, from its ``n x p_l`` Jacobian."""
    return [exact_miniblock_fisher(layer_jacobian[:, b.indices]) for b in partition.blocks]
