"""Delimited-text exports: FIM heatmaps and convergence reports."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .convergence import ConvergenceReport
from .errors import InvalidInputError


def block_boundaries(partition) -> list:
    """Start index of every mini-block of a layer partition, in layout order.

    Only meaningful for partitions whose blocks are contiguous ranges (conv
    kernels); for dense layers the per-neuron blocks interleave, see
    :func:`block_labels`.
    """
    blocks = partition.blocks if hasattr(partition, "blocks") else partition
    return [int(np.min(b.indices if hasattr(b, "indices") else b)) for b in blocks]


def block_labels(partition, size) -> np.ndarray:
    """Block id of every coordinate."""
    ids = np.full(size, -1)
    blocks = partition.blocks if hasattr(partition, "blocks") else partition
    for k, b in enumerate(blocks):
        ids[np.asarray(b.indices if hasattr(b, "indices") else b)] = k
    return ids


def export_heatmap(M, path, partition=None) -> Path:
    """Write ``|M|`` as a comma-separated grid.

    The first line is ``# rows,cols``. With a ``partition`` a companion file
    ``<path>.blocks`` lists, one block per line, the block's label, its first
    index and its size.
    """
    A = np.asarray(M, dtype=np.float64)
    if A.ndim != 2:
        raise InvalidInputError(f"heatmap needs a matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidInputError("heatmap matrix has non-finite entries")
    path = Path(path)
    try:
        with open(path, "w") as fh:
            fh.write(f"# {A.shape[0]},{A.shape[1]}\n")
            np.savetxt(fh, np.abs(A), delimiter=",", fmt="%.10g")
        if partition is not None:
            blocks = partition.blocks if hasattr(partition, "blocks") else partition
            with open(str(path) + ".blocks", "w") as fh:
                fh.write("label,start,size\n")
                for k, b in enumerate(blocks):
                    idx = np.asarray(b.indices if hasattr(b, "indices") else b)
                    label = getattr(b, "label", f"block{k}")
                    fh.write(f"\"{label}\",{int(idx.min())},{len(idx)}\n")
    except OSError as exc:
        raise OSError(f"cannot write heatmap to {path}: {exc}") from exc
    return path


def read_heatmap(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", comments="#", ndmin=2)


def write_convergence_report(report: ConvergenceReport, path) -> Path:
    """One row per iteration: ``k,residual,bound,j_drift,w_drift,monitor_tripped``."""
    path = Path(path)
    lines = [
        f"# lam0={report.lam0!r} K={report.K} n={report.n} lam={report.lam!r} lr={report.lr!r} "
        f"C={report.C!r} drift_threshold={report.drift_threshold!r} "
        f"gram_floor={report.gram_floor!r} gram_floor_sqrt={report.gram_floor_sqrt!r} "
        f"min_gram_seen={float(report.gram_min.min())!r} "
        f"bound_satisfied={report.bound_satisfied} first_violation={report.first_violation} "
        f"in_hypothesis={report.in_hypothesis}",
        "k,residual,bound,j_drift,w_drift,monitor_tripped",
    ]
    lines += [",".join(repr(v) if isinstance(v, float) else str(v) for v in row) for row in report.rows()]
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write convergence report to {path}: {exc}") from exc
    return path
