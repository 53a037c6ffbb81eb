"""Empirical-FIM inspection of a trained network's layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import fisher
from .config import ExperimentConfig
from .linalg import damped_inverse
from .nn import NetworkSpec, Params, forward, loss_eval, per_sample_gradients
from .train import RunRecord, load_dataset, train


@dataclass
class LayerFimView:
    layer: int
    fim: np.ndarray
    inverse: np.ndarray
    partition: fisher.LayerPartition
    in_block: float
    off_block: float
    ratio: float
    record: Optional[RunRecord] = None


def layer_per_sample_gradients(params: Params, spec: NetworkSpec, X, Y, layer: int) -> np.ndarray:
    """``n x p_l`` per-sample loss gradients of one layer."""
    out, tape = forward(params, spec, X)
    _, g = loss_eval(spec.loss, out, Y)
    return per_sample_gradients(params, spec, tape, g * X.shape[0])[layer]


def layer_fim_view(params: Params, spec: NetworkSpec, X, Y, layer: int, damping=1e-3,
                   include_conv_bias=False) -> LayerFimView:
    """Empirical FIM of one layer, its damped inverse and the block mass ratio.

    Conv layers are restricted to their kernel weights unless
    ``include_conv_bias`` is set; dense layers always include the bias.
    """
    J = layer_per_sample_gradients(params, spec, X, Y, layer)
    lp = fisher.partition_layer(spec.layers[layer])
    if spec.layers[layer].is_conv and not include_conv_bias:
        n_w = spec.layers[layer].n_weights
        J = J[:, :n_w]
        lp = fisher.LayerPartition(tuple(b for b in lp.blocks if b.kind != "conv_bias"), n_w)
    F = fisher.empirical_fim(J)
    H = damped_inverse(F, damping)
    inside, off, ratio = fisher.block_mass_ratio(H, lp)
    return LayerFimView(layer, F, H, lp, inside, off, ratio)


def motivation_experiment(config: ExperimentConfig, layer: int, damping=1e-3) -> LayerFimView:
    """Train with ``config`` and inspect ``layer``'s inverse empirical FIM on the training set."""
    data = load_dataset(config)
    record = train(config, data)
    view = layer_fim_view(record.params, config.network.build(), data.X, data.Y, layer, damping)
    view.record = record
    return view
