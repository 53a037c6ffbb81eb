"""Verification harness for linear convergence of exact mini-block NGD.

Works on single-output networks trained with full-batch squared error
``0.5 * ||u(W) - y||^2`` where ``u`` stacks the network outputs over the
``n`` samples. The Jacobian here is the output Jacobian ``du/dW`` and every
iteration moves each mini-block by

    W_b <- W_b - eta * ((1/n) J_b^T J_b + lambda I)^{-1} (1/n) J_b^T (u - y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import fisher
from .errors import DivergenceError, TheoremPreconditionError
from .nn import NetworkSpec, Params, forward, init_params, mlp, per_sample_gradients
from .optim import generic_mbf_step

GRAM_MODES = ("auto", "sample", "param")


@dataclass
class AssumptionMetrics:
    lam0: float
    K: int
    block_min_eigs: np.ndarray
    gram: str
    warnings: List[str] = field(default_factory=list)


@dataclass
class ConvergenceReport:
    lam0: float
    K: int
    n: int
    lam: float
    lr: float
    C: float
    residuals: np.ndarray  # ||u(k) - y||^2, k = 0..k_max
    j_drift: np.ndarray  # ||J(k) - J(0)||_2
    w_drift: np.ndarray  # ||W(k) - W(0)||_2
    gram_min: np.ndarray  # min over blocks of lambda_min of the block Gram at k
    drift_threshold: float  # (C/3) sqrt(lam0)
    gram_floor: float  # 4 lam0 / 9, the smallest block-Gram eigenvalue the drift bound guarantees
    gram_floor_sqrt: float  # 4 sqrt(lam0) / 9, the same floor with the root kept
    monitor_tripped: np.ndarray
    suggested_lam: Optional[float] = None
    suggested_lr: Optional[float] = None
    bound_satisfied: Optional[bool] = None
    first_violation: Optional[int] = None
    warnings: List[str] = field(default_factory=list)

    @property
    def in_hypothesis(self) -> bool:
        return not bool(np.any(self.monitor_tripped))

    def bound(self) -> np.ndarray:
        k = np.arange(len(self.residuals))
        return (1.0 - self.lr) ** k * self.residuals[0]

    def rows(self):
        """One tuple per iteration: ``(k, residual, bound, j_drift, w_drift, tripped)``."""
        b = self.bound()
        return [
            (k, float(self.residuals[k]), float(b[k]), float(self.j_drift[k]),
             float(self.w_drift[k]), int(self.monitor_tripped[k]))
            for k in range(len(self.residuals))
        ]


def output_jacobian_blocks(params: Params, spec: NetworkSpec, X):
    """Outputs ``u`` (length n) and the per-layer output Jacobians ``du/dW_l``."""
    if spec.output_dim != 1:
        raise TheoremPreconditionError("the convergence harness needs a single-output network")
    out, tape = forward(params, spec, X)
    blocks = per_sample_gradients(params, spec, tape, np.ones_like(out))
    return out[:, 0], blocks


def _block_gram_min(Jb, gram):
    n, p = Jb.shape
    if gram == "sample" or (gram == "auto" and p >= n):
        G = Jb @ Jb.T
    else:
        G = Jb.T @ Jb
    return float(np.linalg.eigvalsh(0.5 * (G + G.T))[0])


def _gram_mins(blocks, partition, gram):
    mins = []
    for J, lp in zip(blocks, partition.layers):
        for blk in lp.blocks:
            mins.append(_block_gram_min(J[:, blk.indices], gram))
    return np.array(mins)


def assumption_metrics(spec: NetworkSpec, params0: Params, X, gram="sample",
                       partition: Optional[fisher.MiniBlockPartition] = None) -> AssumptionMetrics:
    """Smallest block-Gram eigenvalue at initialization and the block count.

    ``gram`` selects which Gram of each block Jacobian ``J_b`` (``n x p_b``)
    is used: ``"sample"`` is the ``n x n`` matrix ``J_b J_b^T``, ``"param"``
    the ``p_b x p_b`` matrix ``J_b^T J_b``, and ``"auto"`` the smaller of the
    two, i.e. ``sigma_min(J_b)^2`` over the thin singular values. The default
    ``"sample"`` is the quantity the rate bound actually needs; it is
    singular whenever a block has fewer parameters than there are samples.
    """
    if gram not in GRAM_MODES:
        raise ValueError(f"gram must be one of {GRAM_MODES}")
    if partition is None:
        partition = fisher.partition_network(spec, shared_fc_threshold=np.inf)
    _, blocks = output_jacobian_blocks(params0, spec, X)
    mins = _gram_mins(blocks, partition, gram)
    lam0 = float(mins.min())
    warnings = []
    if lam0 <= 1e-12:
        warnings.append(f"degenerate initialization: lambda_0 = {lam0:.3e} <= 1e-12")
    return AssumptionMetrics(lam0, partition.n_blocks, mins, gram, warnings)


def suggest_damping_and_lr(lam0, n, K, C=0.5, lam=None):
    """Damping ``lambda = 4 lam0 / (9 n)`` and the largest learning rate the bound allows.

    Raises:
        TheoremPreconditionError: ``K < 3``, or the rate numerator is not
            positive for the chosen damping.
    """
    if K < 3:
        raise TheoremPreconditionError(f"the linear-rate bound needs K >= 3 mini-blocks, got {K}")
    if not 0 < C <= 0.5:
        raise TheoremPreconditionError(f"C must lie in (0, 1/2], got {C}")
    if not lam0 > 0:
        raise TheoremPreconditionError(f"lambda_0 must be positive, got {lam0}")
    if lam is None:
        lam = 4.0 * lam0 / (9.0 * n)
    cross = C * math.sqrt(lam0 * K) / (3.0 * math.sqrt(lam * n))
    numerator = 2.0 * K * lam0 / (lam0 + 2.25 * n * lam) - 2.0 * cross - 1.0
    if numerator <= 0:
        raise TheoremPreconditionError(
            f"no valid learning rate: rate numerator {numerator:.4g} <= 0 at lambda={lam:.4g}"
        )
    return lam, numerator / (K + cross) ** 2


def run_exact_mbf(spec: NetworkSpec, params0: Params, X, y, lam, lr, k_max, C=0.5,
                  gram="sample", lam0=None) -> ConvergenceReport:
    """Full-batch exact mini-block NGD for ``k_max`` iterations with monitoring."""
    y = np.asarray(y, dtype=np.float64).ravel()
    n = len(y)
    partition = fisher.partition_network(spec, shared_fc_threshold=np.inf)
    metrics = None
    if lam0 is None:
        metrics = assumption_metrics(spec, params0, X, gram, partition)
        lam0 = metrics.lam0
    threshold = C / 3.0 * math.sqrt(max(lam0, 0.0))
    params = params0.copy()
    w0 = params0.flat()
    residuals, j_drift, w_drift, gram_min = [], [], [], []
    J0 = None
    for k in range(k_max + 1):
        u, blocks = output_jacobian_blocks(params, spec, X)
        r = u - y
        res = float(r @ r)
        if not np.isfinite(res):
            raise DivergenceError("non-finite residual", k)
        J = np.concatenate(blocks, axis=1)
        if J0 is None:
            J0 = J
        residuals.append(res)
        j_drift.append(float(np.linalg.norm(J - J0, 2)))
        w_drift.append(float(np.linalg.norm(params.flat() - w0)))
        gram_min.append(float(_gram_mins(blocks, partition, gram).min()))
        if k < k_max:
            params = generic_mbf_step(params, spec, blocks, r, lr, lam, partition)
    j_drift = np.array(j_drift)
    report = ConvergenceReport(
        lam0=lam0, K=partition.n_blocks, n=n, lam=lam, lr=lr, C=C,
        residuals=np.array(residuals), j_drift=j_drift, w_drift=np.array(w_drift),
        gram_min=np.array(gram_min), drift_threshold=threshold,
        gram_floor=4.0 * lam0 / 9.0, gram_floor_sqrt=4.0 * math.sqrt(max(lam0, 0.0)) / 9.0,
        monitor_tripped=j_drift > threshold,
        warnings=list(metrics.warnings) if metrics else [],
    )
    if 0 < lr < 1:
        report.bound_satisfied, report.first_violation = verify_linear_rate(report, lr, 0.0)
    return report


def verify_linear_rate(report, lr, slack=0.0):
    """Check ``r(k) <= (1 - lr)^k r(0) + slack`` for every recorded ``k``.

    ``report`` is a :class:`ConvergenceReport` or a sequence of squared
    residuals. Returns ``(passed, first_violating_k)``.
    """
    if not 0 < lr < 1:
        raise ValueError(f"learning rate must lie in (0, 1), got {lr}")
    res = np.asarray(report.residuals if isinstance(report, ConvergenceReport) else report,
                     dtype=np.float64)
    bound = (1.0 - lr) ** np.arange(len(res)) * res[0] + slack
    bad = np.nonzero(res > bound)[0]
    if len(bad):
        return False, int(bad[0])
    return True, None


def theorem_instance(widths=(4, 8, 1), n=20, seed=0, target_noise=1e-4):
    """A seeded single-output tanh regression problem.

    Inputs are standard normal; targets are the initial network outputs plus
    ``target_noise`` times standard normal noise, so ``target_noise`` sets
    ``r0`` and with it how far the weights have to travel.
    Returns ``(spec, params0, X, y)``.
    """
    rng = np.random.default_rng(seed)
    spec = mlp(list(widths), "tanh", "identity", "squared_error")
    params0 = init_params(spec, seed)
    X = rng.standard_normal((n, widths[0]))
    u0, _ = output_jacobian_blocks(params0, spec, X)
    y = u0 + target_noise * rng.standard_normal(n)
    return spec, params0, X, y
