"""Experiment configuration: dataclasses, YAML round-trip and bundled presets."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .data import SYNTH_KINDS
from .errors import ConfigError
from .nn import LayerSpec, NetworkSpec
from .optim import OptimizerConfig

DATA_SOURCES = ("fixture", "mnist", "idx", "synthetic")


@dataclass
class NetworkConfig:
    """Declarative layer list; each entry is a dict such as
    ``{kind: dense, in: 784, out: 64, activation: relu}`` or
    ``{kind: conv2d, in: 1, out: 32, radius: 2, height: 8, width: 8, activation: relu}``.
    """

    loss: str = "squared_error"
    layers: List[Dict[str, Any]] = field(default_factory=list)

    def build(self) -> NetworkSpec:
        if not self.layers:
            raise ConfigError("network.layers is empty")
        built = []
        for i, entry in enumerate(self.layers):
            entry = dict(entry)
            kind = entry.pop("kind", "dense")
            try:
                if kind == "dense":
                    built.append(LayerSpec.dense(entry.pop("in"), entry.pop("out"),
                                                 entry.pop("activation", "identity"),
                                                 entry.pop("bias", True)))
                elif kind == "conv2d":
                    built.append(LayerSpec.conv2d(entry.pop("in"), entry.pop("out"),
                                                  entry.pop("radius"), entry.pop("height"),
                                                  entry.pop("width"),
                                                  entry.pop("activation", "identity"),
                                                  entry.pop("bias", True)))
                else:
                    raise ConfigError(f"network.layers[{i}]: unknown kind {kind!r}")
            except KeyError as exc:
                raise ConfigError(f"network.layers[{i}]: missing field {exc}") from None
            except ValueError as exc:
                raise ConfigError(f"network.layers[{i}]: {exc}") from None
            if entry:
                raise ConfigError(f"network.layers[{i}]: unknown fields {sorted(entry)}")
        try:
            return NetworkSpec(tuple(built), self.loss)
        except ValueError as exc:
            raise ConfigError(f"network: {exc}") from None


@dataclass
class DataConfig:
    """Where the training set comes from.

    ``fixture`` is the bundled digit set, ``mnist`` a directory holding the
    MNIST training IDX files, ``idx`` explicit image/label paths and
    ``synthetic`` one of the generated datasets. ``n`` takes a seeded subset
    (``None``: everything), ``downscale`` area-averages digit images to that
    side length, and ``autoencoder`` makes the targets equal the inputs.
    """

    source: str = "fixture"
    directory: Optional[str] = None
    images: Optional[str] = None
    labels: Optional[str] = None
    kind: Optional[str] = None
    n: Optional[int] = None
    d: int = 4
    downscale: Optional[int] = None
    autoencoder: bool = False
    val_fraction: float = 0.0
    seed: int = 0


@dataclass
class ExperimentConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 100
    epochs: int = 10
    seed: int = 0
    lr_decay_period: Optional[int] = None
    lr_decay_factor: float = 0.1
    warm_start: bool = True
    output_dir: Optional[str] = None

    def validate(self) -> "ExperimentConfig":
        """Check everything that can be checked without loading data."""
        self.network.build()
        d = self.data
        if d.source not in DATA_SOURCES:
            raise ConfigError(f"data.source must be one of {DATA_SOURCES}, got {d.source!r}")
        if d.source == "synthetic" and d.kind not in SYNTH_KINDS:
            raise ConfigError(f"data.kind must be one of {SYNTH_KINDS}, got {d.kind!r}")
        if d.source == "synthetic" and not d.n:
            raise ConfigError("synthetic data needs data.n")
        if d.source == "idx":
            if not d.images:
                raise ConfigError("data.source idx needs data.images")
            for p in (d.images, d.labels):
                if p is not None and not Path(p).exists():
                    raise ConfigError(f"data file {p} does not exist")
        if d.source == "mnist" and (not d.directory or not Path(d.directory).is_dir()):
            raise ConfigError(f"MNIST directory {d.directory!r} does not exist")
        if not 0.0 <= d.val_fraction < 1.0:
            raise ConfigError("data.val_fraction must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if d.n is not None and self.batch_size > d.n:
            raise ConfigError(f"batch_size {self.batch_size} exceeds the dataset size {d.n}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr_decay_period is not None and self.lr_decay_period < 1:
            raise ConfigError("lr_decay_period must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **dotted) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"optimizer.lr": 1e-3})``."""
        data = self.to_dict()
        for key, value in dotted.items():
            set_dotted(data, key, value)
        return from_dict(data)


def set_dotted(data: dict, key: str, value) -> None:
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config field {key!r}")
    node[parts[-1]] = value


def _build(cls, values, section):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"{section} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"{section}: unknown fields {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def from_dict(data: dict) -> ExperimentConfig:
    data = copy.deepcopy(data or {})
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown top-level fields {sorted(unknown)}")
    optimizer = data.pop("optimizer", None)
    cfg = ExperimentConfig(
        network=_build(NetworkConfig, data.pop("network", None), "network"),
        data=_build(DataConfig, data.pop("data", None), "data"),
        optimizer=_build(OptimizerConfig, optimizer, "optimizer"),
        **data,
    )
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data)


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)


# -- presets -------------------------------------------------------------------

def _dense(widths, hidden, out_act="identity", middle=None):
    layers = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        act = out_act if i == len(widths) - 2 else hidden
        if middle is not None and i == middle:
            act = "identity"
        layers.append({"kind": "dense", "in": a, "out": b, "activation": act})
    return layers


# One learning rate per method for the desk-scale autoencoder, taken from the
# autoencoder search grid; damping stays at each method's default.
AUTOENCODER_LR = {
    "mbf": 3e-5,
    "adam": 1e-3,
    "sgdm": 0.01,
    "kfac": 1e-3,
    "shampoo": 1e-3,
}

# Autoencoder search grid for MBF: learning rate x damping.
MBF_AUTOENCODER_GRID = {
    "lr": [1e-7, 3e-7, 1e-6, 3e-6, 1e-5, 3e-5, 1e-4],
    "damping": [1e-5, 3e-5, 1e-4, 3e-4, 0.001, 0.003, 0.01],
}


def preset(name: str, method: str = "mbf") -> ExperimentConfig:
    """Bundled experiment presets.

    * ``autoencoder``: 784-64-16-64-784 ReLU autoencoder with a linear code
      layer and logistic outputs, 2000 digits, batch 200, 20 epochs,
      ``T1 = 1``, ``T2 = 20``.
    * ``classifier16``: 256-20-20-20-20-20-10 tanh classifier on 16x16
      digits, 2000 samples, SGD-m for 50 epochs.
    * ``simple_cnn``: one 5x5 conv layer with 32 filters on 8x8 digits and a
      softmax read-out, ``T1 = 10``, ``T2 = 100``.
    """
    if name == "autoencoder":
        lr = AUTOENCODER_LR.get(method, 1e-3)
        return ExperimentConfig(
            network=NetworkConfig("bce_with_sigmoid", _dense([784, 64, 16, 64, 784], "relu", middle=1)),
            data=DataConfig(source="fixture", n=2000, autoencoder=True),
            optimizer=OptimizerConfig(method, lr=lr, T1=1, T2=20),
            batch_size=200, epochs=20,
        ).validate()
    if name == "classifier16":
        return ExperimentConfig(
            network=NetworkConfig("softmax_ce", _dense([256, 20, 20, 20, 20, 20, 10], "tanh")),
            data=DataConfig(source="fixture", n=2000, downscale=16),
            optimizer=OptimizerConfig("sgdm", lr=0.05),
            batch_size=100, epochs=50,
        ).validate()
    if name == "simple_cnn":
        return ExperimentConfig(
            network=NetworkConfig("softmax_ce", [
                {"kind": "conv2d", "in": 1, "out": 32, "radius": 2, "height": 8, "width": 8,
                 "activation": "relu"},
                {"kind": "dense", "in": 32 * 64, "out": 10},
            ]),
            data=DataConfig(source="fixture", n=2000, downscale=8, val_fraction=0.1),
            optimizer=OptimizerConfig(method, lr=0.01 if method == "sgdm" else 1e-3, T1=10, T2=100),
            batch_size=100, epochs=10,
        ).validate()
    raise ConfigError(f"unknown preset {name!r}; choose autoencoder, classifier16 or simple_cnn")


PRESETS = ("autoencoder", "classifier16", "simple_cnn")
