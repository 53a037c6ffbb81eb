"""Preconditioner storage: measured float counts against closed-form counts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

from . import fisher
from .errors import ConfigError
from .nn import LayerSpec, NetworkSpec
from .optim import OptimizerConfig, make_optimizer


@dataclass
class LayerStorage:
    layer: int
    description: str
    measured: int
    formula: int
    formula_text: str

    @property
    def matches(self) -> bool:
        return self.measured == self.formula


@dataclass
class StorageAudit:
    method: str
    layers: List[LayerStorage]

    @property
    def all_match(self) -> bool:
        return all(l.matches for l in self.layers)

    def table(self) -> str:
        lines = [f"{'layer':>5}  {'shape':<28}{'measured':>14}{'formula':>14}  formula"]
        for l in self.layers:
            lines.append(f"{l.layer:>5}  {l.description:<28}{l.measured:>14}{l.formula:>14}  {l.formula_text}")
        return "\n".join(lines)


def _describe(layer: LayerSpec) -> str:
    if layer.is_conv:
        return f"conv J={layer.n_in} I={layer.n_out} |D|={layer.taps}"
    return f"dense {layer.n_in}->{layer.n_out}"


def storage_formula(layer: LayerSpec, config: OptimizerConfig):
    """Closed-form preconditioner float count ``(value, text)`` for one layer."""
    I, O = layer.n_in, layer.n_out
    b = 1 if layer.bias else 0
    m = config.method
    if m == "mbf":
        if layer.is_conv:
            J, I_out, D = layer.n_in, layer.n_out, layer.taps
            return I_out * J * D ** 2 + b * I_out, "I*J*|D|^2 + I"
        if fisher.uses_shared_fc(layer, config.shared_fc_threshold):
            return (I + b) ** 2, "(I+1)^2 (shared)"
        return O * (I + b) ** 2, "O*(I+1)^2"
    if m == "kfac":
        if layer.is_conv:
            raise ConfigError("KFAC storage is only defined for dense layers here")
        return (I + b) ** 2 + O ** 2, "(I+1)^2 + O^2"
    if m == "adam":
        return 2 * layer.n_params, "2 * params"
    if m == "shampoo":
        rows, cols = (layer.n_out, layer.n_in * layer.taps + b) if layer.is_conv else (I + b, O)
        return rows ** 2 + cols ** 2, "rows^2 + cols^2"
    raise ConfigError(f"no storage formula for optimizer {m!r}")


def storage_audit(spec: NetworkSpec, config: OptimizerConfig) -> StorageAudit:
    """Instantiate the optimizer and compare its state size with the formulas."""
    opt = make_optimizer(config, spec)
    rows = []
    for l, layer in enumerate(spec.layers):
        value, text = storage_formula(layer, config)
        rows.append(LayerStorage(l, _describe(layer), int(opt.state_floats(l)), int(value), text))
    return StorageAudit(config.method, rows)
