"""Datasets: IDX files, the bundled digit fixture and synthetic generators."""

from __future__ import annotations

import gzip
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConsistencyError, IdxFormatError, InvalidInputError

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049

FIXTURE_IMAGES = "digits-images-idx3-ubyte.gz"
FIXTURE_LABELS = "digits-labels-idx1-ubyte.gz"

SYNTH_KINDS = ("downscaled_digits_16x16", "random_regression", "two_gaussians")


@dataclass
class Batch:
    """Inputs ``X`` (``n x d``), targets ``Y`` (``n x k``) and optional integer labels."""

    X: np.ndarray
    Y: np.ndarray
    labels: Optional[np.ndarray] = None

    def __len__(self):
        return self.X.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.X[idx], self.Y[idx], None if self.labels is None else self.labels[idx])


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expected_magic=None) -> np.ndarray:
    """Read a uint8 IDX file (optionally gzip-compressed) into an array."""
    try:
        with _open(path) as fh:
            raw = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read IDX file {path}: {exc}") from exc
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header")
    magic = int.from_bytes(raw[:4], "big")
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"{path}: magic number {magic}, expected {expected_magic}")
    if raw[0] != 0 or raw[1] != 0 or raw[2] != 0x08:
        raise IdxFormatError(f"{path}: magic number {magic} is not a uint8 IDX header")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = tuple(int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim))
    payload = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if payload.size != int(np.prod(dims)):
        raise IdxFormatError(f"{path}: payload has {payload.size} bytes, header promises {dims}")
    return payload.reshape(dims)


def write_idx(path, array) -> None:
    """Write a uint8 array as an IDX file; gzip-compressed if ``path`` ends in ``.gz``."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise InvalidInputError(f"IDX payloads must be uint8, got {a.dtype}")
    header = bytes([0, 0, 0x08, a.ndim]) + b"".join(int(d).to_bytes(4, "big") for d in a.shape)
    data = header + np.ascontiguousarray(a).tobytes()
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(data)


def one_hot(labels, n_classes=None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def load_idx(images_path, labels_path=None, one_hot_labels=True, n_classes=10) -> Batch:
    """Images scaled to ``[0, 1]`` and flattened, with labels one-hot or raw.

    Without a labels file the targets are the images themselves, the
    autoencoder setting.
    """
    images = read_idx(images_path, IMAGES_MAGIC)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: images must be 3-D, got {images.ndim}-D")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    if labels_path is None:
        return Batch(X, X.copy())
    labels = read_idx(labels_path, LABELS_MAGIC)
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: labels must be 1-D, got {labels.ndim}-D")
    if len(labels) != len(images):
        raise ConsistencyError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels"
        )
    labels = labels.astype(np.int64)
    Y = one_hot(labels, n_classes) if one_hot_labels else labels[:, None].astype(np.float64)
    return Batch(X, Y, labels)


def fixture_paths():
    """Paths of the bundled 28x28 digit images and labels."""
    root = resources.files("mbf") / "fixtures"
    return Path(str(root / FIXTURE_IMAGES)), Path(str(root / FIXTURE_LABELS))


def load_digits(directory=None, one_hot_labels=True) -> Batch:
    """MNIST-format training digits from ``directory`` or the bundled fixture.

    ``directory`` must contain ``train-images-idx3-ubyte`` and
    ``train-labels-idx1-ubyte`` (optionally ``.gz``).
    """
    if directory is None:
        images, labels = fixture_paths()
        return load_idx(images, labels, one_hot_labels)
    directory = Path(directory)
    found = []
    for stem in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"):
        for name in (stem, stem + ".gz"):
            if (directory / name).exists():
                found.append(directory / name)
                break
        else:
            raise FileNotFoundError(f"{directory / stem} not found")
    return load_idx(found[0], found[1], one_hot_labels)


def area_resample_matrix(n_in, n_out) -> np.ndarray:
    """``n_out x n_in`` matrix averaging input cells by their overlap with each output cell."""
    edges_in = np.arange(n_in + 1) / n_in
    edges_out = np.arange(n_out + 1) / n_out
    lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
    hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
    overlap = np.clip(hi - lo, 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def downscale(images, size) -> np.ndarray:
    """Area-average square images (``n x s x s``) down to ``size x size``."""
    images = np.asarray(images, dtype=np.float64)
    R = area_resample_matrix(images.shape[-1], size)
    C = area_resample_matrix(images.shape[-2], size)
    return np.einsum("ij,njk,lk->nil", C, images, R)


def synth_dataset(kind, n, seed, d=4, source: Optional[Batch] = None) -> Batch:
    """Deterministic datasets for experiments and tests.

    * ``downscaled_digits_16x16``: ``n`` digits drawn without replacement from
      ``source`` (default: the bundled fixture), area-averaged to 16x16;
      ``X`` is ``n x 256`` in ``[0, 1]``, ``Y`` one-hot ``n x 10``.
    * ``random_regression``: standard normal ``X`` (``n x d``) and
      ``y = sin(X w) + 0.1 * noise`` (``n x 1``) for a random unit ``w``.
    * ``two_gaussians``: two unit-variance clusters centred at ``+-mu`` with
      ``|mu| = 1.5``; ``X`` is ``n x d``, ``Y`` one-hot ``n x 2``.
    """
    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    if kind == "downscaled_digits_16x16":
        source = load_digits() if source is None else source
        if n > len(source):
            raise InvalidInputError(f"requested {n} digits, source holds {len(source)}")
        idx = np.sort(rng.choice(len(source), n, replace=False))
        side = int(round(np.sqrt(source.X.shape[1])))
        small = downscale(source.X[idx].reshape(n, side, side), 16)
        labels = source.labels[idx] if source.labels is not None else None
        Y = one_hot(labels, 10) if labels is not None else small.reshape(n, -1)
        return Batch(small.reshape(n, 256), Y, labels)
    if kind == "random_regression":
        X = rng.standard_normal((n, d))
        w = rng.standard_normal(d)
        w /= np.linalg.norm(w)
        y = np.sin(X @ w) + 0.1 * rng.standard_normal(n)
        return Batch(X, y[:, None])
    if kind == "two_gaussians":
        labels = rng.integers(0, 2, n)
        mu = rng.standard_normal(d)
        mu *= 1.5 / np.linalg.norm(mu)
        X = rng.standard_normal((n, d)) + np.where(labels[:, None] == 1, mu, -mu)
        return Batch(X, one_hot(labels, 2), labels)
    raise InvalidInputError(f"unknown synthetic dataset {kind!r}; choose from {SYNTH_KINDS}")
