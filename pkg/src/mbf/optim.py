"""Optimizers sharing one interface: SGD-m, Adam, MBF, generic MBF, KFAC, Shampoo.

Every optimizer owns its state and updates a :class:`~mbf.nn.Params` in place::

    opt = make_optimizer(config, spec)
    opt.warm_start(batches_of_gradients)   # optional statistics pass
    for X, Y in batches:
        loss, grads = loss_and_gradients(params, spec, X, Y)
        opt.step(params, grads, lr)

The second-order methods keep an uncorrected gradient momentum
``m <- mu * m + g`` and precondition ``m``; weight decay enters as
``p = P(m) + gamma * W`` and ``W <- W - lr * p``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List, Optional

import numpy as np

from . import fisher
from .errors import ConfigError, InversionError, UnsupportedLayerError
from .linalg import damped_inverse, inverse_pth_root
from .nn import Gradients, LayerSpec, NetworkSpec, Params

METHODS = ("sgdm", "adam", "mbf", "mbf_generic", "kfac", "shampoo")

DEFAULT_DAMPING = {
    "sgdm": 0.0,
    "adam": 1e-8,
    "mbf": 0.003,
    "mbf_generic": 0.003,
    "kfac": 0.03,
    "shampoo": 0.01,
}


@dataclass
class OptimizerConfig:
    method: str = "mbf"
    lr: float = 1e-3
    damping: Optional[float] = None  # lambda for mbf/kfac, epsilon for adam/shampoo
    weight_decay: float = 0.0
    momentum: float = 0.9
    beta: float = 0.9  # EMA factor for curvature statistics
    T1: int = 1
    T2: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    shared_fc_threshold: int = fisher.SHARED_FC_THRESHOLD

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown optimizer {self.method!r}; choose from {METHODS}")
        if self.damping is None:
            self.damping = DEFAULT_DAMPING[self.method]
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.damping < 0 or self.weight_decay < 0:
            raise ConfigError("damping and weight decay must be nonnegative")
        for name in ("momentum", "beta", "beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.T1 < 1 or self.T2 < 1:
            raise ConfigError("T1 and T2 must be >= 1")
        if self.method in ("mbf", "mbf_generic", "kfac", "shampoo") and self.damping <= 0:
            raise ConfigError(f"{self.method} needs a positive damping value")


@dataclass
class LrSchedule:
    """Step decay: ``initial * factor ** (epoch // period)``; no decay if ``period`` is None."""

    initial: float
    period: Optional[int] = None
    factor: float = 0.1

    def __call__(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError("epoch must be nonnegative")
        if not self.period:
            return self.initial
        return self.initial * self.factor ** (epoch // self.period)


def lr_schedule(schedule: LrSchedule, epoch: int) -> float:
    return schedule(epoch)


# -- matrix views of a layer's gradient -------------------------------------------

def _augmented(layer: LayerSpec, dW, db) -> np.ndarray:
    """Dense: ``(I+1) x O`` with the bias as last row. Conv: ``I x (J*|Delta| + 1)``."""
    if layer.is_conv:
        mat = dW.transpose(1, 0, 2, 3).reshape(layer.n_out, -1)
        return mat if db is None else np.hstack([mat, db[:, None]])
    return dW if db is None else np.vstack([dW, db[None, :]])


def _split_augmented(layer: LayerSpec, mat):
    if layer.is_conv:
        nw = layer.n_in * layer.taps
        k = layer.kernel
        dW = mat[:, :nw].reshape(layer.n_out, layer.n_in, k, k).transpose(1, 0, 2, 3)
        db = mat[:, nw] if layer.bias else None
        return dW, db
    return mat[:layer.n_in], (mat[layer.n_in] if layer.bias else None)


class Optimizer:
    """Base class: holds the iteration counter and the gradient momentum."""

    needs_per_sample = False

    def __init__(self, spec: NetworkSpec, config: OptimizerConfig):
        self.spec = spec
        self.config = config
        self.iteration = 0
        self.mom_w = [np.zeros(layer.weight_shape) for layer in spec.layers]
        self.mom_b = [np.zeros(layer.n_out) if layer.bias else None for layer in spec.layers]

    def warm_start(self, gradients: Iterable[Gradients]) -> None:
        """Initialize curvature statistics from a pass over the data (no-op here)."""

    def step(self, params: Params, grads: Gradients, lr: float) -> None:
        self.iteration += 1
        self._step(params, grads, lr)

    def _step(self, params, grads, lr):
        raise NotImplementedError

    def _accumulate_momentum(self, grads):
        mu = self.config.momentum
        for l in range(len(self.spec.layers)):
            self.mom_w[l] = mu * self.mom_w[l] + grads.weights[l]
            if self.mom_b[l] is not None:
                self.mom_b[l] = mu * self.mom_b[l] + grads.biases[l]

    def _apply(self, params, l, dir_w, dir_b, lr):
        gamma = self.config.weight_decay
        params.weights[l] -= lr * (dir_w + gamma * params.weights[l])
        if dir_b is not None:
            params.biases[l] -= lr * (dir_b + gamma * params.biases[l])

    def state_floats(self, l) -> int:
        """Floats held by layer ``l``'s preconditioner (momentum excluded)."""
        return 0


class SGDM(Optimizer):
    def _step(self, params, grads, lr):
        self._accumulate_momentum(grads)
        for l in range(len(self.spec.layers)):
            self._apply(params, l, self.mom_w[l], self.mom_b[l], lr)


class Adam(Optimizer):
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, spec, config):
        super().__init__(spec, config)
        self.v_w = [np.zeros_like(m) for m in self.mom_w]
        self.v_b = [None if m is None else np.zeros_like(m) for m in self.mom_b]

    def _step(self, params, grads, lr):
        b1, b2, eps = self.config.beta1, self.config.beta2, self.config.damping
        t = self.iteration
        c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
        for l in range(len(self.spec.layers)):
            self.mom_w[l] = b1 * self.mom_w[l] + (1 - b1) * grads.weights[l]
            self.v_w[l] = b2 * self.v_w[l] + (1 - b2) * grads.weights[l] ** 2
            dir_w = (self.mom_w[l] / c1) / (np.sqrt(self.v_w[l] / c2) + eps)
            dir_b = None
            if self.mom_b[l] is not None:
                self.mom_b[l] = b1 * self.mom_b[l] + (1 - b1) * grads.biases[l]
                self.v_b[l] = b2 * self.v_b[l] + (1 - b2) * grads.biases[l] ** 2
                dir_b = (self.mom_b[l] / c1) / (np.sqrt(self.v_b[l] / c2) + eps)
            self._apply(params, l, dir_w, dir_b, lr)

    def state_floats(self, l):
        n = self.v_w[l].size + (0 if self.v_b[l] is None else self.v_b[l].size)
        return 2 * n


class MBF(Optimizer):
    """Practical mini-block Fisher method with outer-product statistics.

    Conv layers keep one ``|Delta| x |Delta|`` matrix per kernel and a diagonal
    for the bias. Dense layers keep one ``(I+1) x (I+1)`` matrix per output
    neuron, or a single shared one when the layer exceeds
    ``config.shared_fc_threshold`` entries.
    """

    def __init__(self, spec, config):
        super().__init__(spec, config)
        self.partition = fisher.partition_network(spec, config.shared_fc_threshold)
        self.stats: List[fisher.MiniBlockStats] = []
        for layer, lp in zip(spec.layers, self.partition.layers):
            if layer.is_conv:
                G = np.zeros((layer.n_in * layer.n_out, layer.taps, layer.taps))
                diag = np.zeros(layer.n_out) if layer.bias else None
            else:
                count = 1 if lp.blocks[0].kind == "fc_shared" else layer.n_out
                d = layer.n_in + (1 if layer.bias else 0)
                G = np.zeros((count, d, d))
                diag = None
            self.stats.append(fisher.MiniBlockStats(G, np.empty_like(G), diag))
        for l in range(len(self.stats)):
            self._refresh_inverse(l)

    def _instant_stats(self, layer, dW, db):
        if layer.is_conv:
            K = fisher.kernel_gradients(dW)
            return fisher.outer_stack(K), (None if db is None else db ** 2)
        N = fisher.neuron_gradients(dW, db)
        if self._shared(layer):
            return fisher.spatial_average_fc(N)[None], None
        return fisher.outer_stack(N), None

    def _shared(self, layer):
        return fisher.uses_shared_fc(layer, self.config.shared_fc_threshold)

    def _update_stats(self, l, dW, db, beta):
        layer = self.spec.layers[l]
        st = self.stats[l]
        G_new, diag_new = self._instant_stats(layer, dW, db)
        st.G = fisher.update_stats_ema(st.G, G_new, beta)
        if st.diag is not None:
            st.diag = fisher.update_stats_ema(st.diag, diag_new, beta)
        st.stats_iteration = self.iteration

    def _refresh_inverse(self, l):
        st = self.stats[l]
        lam = self.config.damping
        st.inverse = damped_inverse(st.G, lam, label=f"layer {l}")
        if st.diag is not None:
            st.diag_inverse = 1.0 / (st.diag + lam)
        st.inverse_iteration = self.iteration

    def warm_start(self, gradients):
        sums = [None] * len(self.stats)
        diag_sums = [None] * len(self.stats)
        count = 0
        for grads in gradients:
            count += 1
            for l, layer in enumerate(self.spec.layers):
                G_new, diag_new = self._instant_stats(layer, grads.weights[l], grads.biases[l])
                sums[l] = G_new if sums[l] is None else sums[l] + G_new
                if diag_new is not None:
                    diag_sums[l] = diag_new if diag_sums[l] is None else diag_sums[l] + diag_new
        if count == 0:
            return
        for l, st in enumerate(self.stats):
            st.G = sums[l] / count
            if st.diag is not None:
                st.diag = diag_sums[l] / count
            self._refresh_inverse(l)

    def precondition(self, l, mW, mb):
        """Apply the cached ``(G + lambda I)^{-1}`` blocks of layer ``l``."""
        layer = self.spec.layers[l]
        st = self.stats[l]
        if layer.is_conv:
            K = fisher.kernel_gradients(mW)
            P = np.einsum("bij,bj->bi", st.inverse, K).reshape(mW.shape)
            return P, (None if mb is None else mb * st.diag_inverse)
        N = fisher.neuron_gradients(mW, mb)
        if st.inverse.shape[0] == 1:
            P = N @ st.inverse[0]
        else:
            P = np.einsum("bij,bj->bi", st.inverse, N)
        return _split_augmented(layer, P.T)

    def _step(self, params, grads, lr):
        k = self.iteration
        self._accumulate_momentum(grads)
        for l in range(len(self.spec.layers)):
            if k % self.config.T1 == 0:
                self._update_stats(l, grads.weights[l], grads.biases[l], self.config.beta)
            if k % self.config.T2 == 0:
                self._refresh_inverse(l)
            dir_w, dir_b = self.precondition(l, self.mom_w[l], self.mom_b[l])
            self._apply(params, l, dir_w, dir_b, lr)

    def state_floats(self, l):
        return self.stats[l].float_count()


def _solve_blocks(F, g, lam, labels):
    """Solve ``(F_b + lam I) x_b = g_b`` for a stack of equally sized blocks."""
    if lam > 0:
        H = damped_inverse(F, lam, label=labels)
        return np.einsum("bij,bj->bi", H, g)
    try:
        return np.linalg.solve(F, g[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise InversionError("singular undamped mini-block Fisher", labels) from exc


def generic_mbf_step(params: Params, spec: NetworkSpec, jacobian_blocks, residuals, lr, lam,
                     partition: Optional[fisher.MiniBlockPartition] = None) -> Params:
    """One exact mini-block natural-gradient step; returns new parameters.

    ``jacobian_blocks[l]`` is the ``n x p_l`` per-sample Jacobian of layer
    ``l``. The gradient is ``(1/n) J^T r``; with ``residuals=None`` it is the
    mean of the rows (``r = 1``), which is the right choice when the rows are
    per-sample loss gradients. Each block then moves by
    ``-lr * ((1/n) J_b^T J_b + lam I)^{-1} g_b``.
    """
    if partition is None:
        partition = fisher.partition_network(spec, shared_fc_threshold=np.inf)
    n = jacobian_blocks[0].shape[0]
    r = np.ones(n) if residuals is None else np.asarray(residuals, dtype=np.float64).ravel()
    new_flat = []
    for l, lp in enumerate(partition.layers):
        J = jacobian_blocks[l]
        grad = J.T @ r / n
        step = np.zeros(lp.n_params)
        # blocks of a layer share a size except a conv bias block; group by size
        by_size = {}
        for blk in lp.blocks:
            if blk.kind == "conv_bias":
                # diagonal block
                f = np.mean(J[:, blk.indices] ** 2, axis=0)
                step[blk.indices] = grad[blk.indices] / (f + lam)
                continue
            by_size.setdefault(blk.size, []).append(blk)
        for size, blks in by_size.items():
            idx = np.stack([b.indices for b in blks])  # B x size
            Jb = J[:, idx]  # n x B x size
            F = np.einsum("nbi,nbj->bij", Jb, Jb) / n
            F = 0.5 * (F + np.swapaxes(F, -1, -2))
            step[idx] = _solve_blocks(F, grad[idx], lam, f"layer {l}")
        new_flat.append(params.layer_flat(l) - lr * step)
    return Params.from_flat(spec, np.concatenate(new_flat))


class GenericMBF(Optimizer):
    """Exact per-sample mini-block Fisher, no momentum, EMA or weight decay."""

    needs_per_sample = True

    def __init__(self, spec, config):
        super().__init__(spec, config)
        self.partition = fisher.partition_network(spec, shared_fc_threshold=np.inf)

    def _step(self, params, grads, lr):
        if not getattr(grads, "per_sample", None):
            raise ValueError("generic MBF needs per-sample gradients")
        new = generic_mbf_step(params, self.spec, grads.per_sample, None, lr,
                               self.config.damping, self.partition)
        params.weights[:] = new.weights
        params.biases[:] = new.biases


class KFAC(Optimizer):
    """KFAC for dense layers, factors damped by ``sqrt(lambda)`` each."""

    def __init__(self, spec, config):
        super().__init__(spec, config)
        for layer in spec.layers:
            if layer.is_conv:
                raise UnsupportedLayerError("KFAC is implemented for dense layers only")
        self.factors = []
        self.H_A, self.H_G = [], []
        for layer in spec.layers:
            d = layer.n_in + (1 if layer.bias else 0)
            self.factors.append(fisher.KfacFactors(np.zeros((d, d)), np.zeros((layer.n_out, layer.n_out))))
            self.H_A.append(None)
            self.H_G.append(None)
        for l in range(len(spec.layers)):
            self._refresh_inverse(l)

    def _instant_factors(self, l, grads):
        layer = self.spec.layers[l]
        a = grads.inputs[l]
        if layer.bias:
            a = fisher.augment(a)
        n = a.shape[0]
        return fisher.kfac_factors(a, n * grads.deltas[l])

    def _refresh_inverse(self, l):
        damp = math.sqrt(self.config.damping)
        f = self.factors[l]
        self.H_A[l] = damped_inverse(f.A, damp, label=f"layer {l} A")
        self.H_G[l] = damped_inverse(f.Gamma, damp, label=f"layer {l} Gamma")

    def warm_start(self, gradients):
        sums = None
        count = 0
        for grads in gradients:
            inst = [self._instant_factors(l, grads) for l in range(len(self.spec.layers))]
            if sums is None:
                sums = [(f.A, f.Gamma) for f in inst]
            else:
                sums = [(a + f.A, g + f.Gamma) for (a, g), f in zip(sums, inst)]
            count += 1
        if count == 0:
            return
        for l, (a, g) in enumerate(sums):
            self.factors[l] = fisher.KfacFactors(a / count, g / count)
            self._refresh_inverse(l)

    def precondition(self, l, mW, mb):
        layer = self.spec.layers[l]
        M = _augmented(layer, mW, mb)
        return _split_augmented(layer, self.H_A[l] @ M @ self.H_G[l])

    def _step(self, params, grads, lr):
        k = self.iteration
        beta = self.config.beta
        self._accumulate_momentum(grads)
        for l in range(len(self.spec.layers)):
            if k % self.config.T1 == 0:
                inst = self._instant_factors(l, grads)
                f = self.factors[l]
                self.factors[l] = fisher.KfacFactors(
                    fisher.update_stats_ema(f.A, inst.A, beta),
                    fisher.update_stats_ema(f.Gamma, inst.Gamma, beta),
                )
            if k % self.config.T2 == 0:
                self._refresh_inverse(l)
            dir_w, dir_b = self.precondition(l, self.mom_w[l], self.mom_b[l])
            self._apply(params, l, dir_w, dir_b, lr)

    def state_floats(self, l):
        f = self.factors[l]
        return int(f.A.size + f.Gamma.size)


class Shampoo(Optimizer):
    """Shampoo on the matricized layer gradient with inverse 4th roots.

    Dense layers use the ``(I+1) x O`` bias-augmented gradient; conv kernels
    are flattened to ``I x (J*|Delta|)`` with the bias appended as a column.
    """

    ROOT = 4

    def __init__(self, spec, config):
        super().__init__(spec, config)
        self.L, self.R, self.L_root, self.R_root = [], [], [], []
        eps = config.damping
        for layer in spec.layers:
            rows, cols = _augmented(layer, np.zeros(layer.weight_shape),
                                    np.zeros(layer.n_out) if layer.bias else None).shape
            self.L.append(np.zeros((rows, rows)))
            self.R.append(np.zeros((cols, cols)))
            self.L_root.append(eps ** (-1.0 / self.ROOT) * np.eye(rows))
            self.R_root.append(eps ** (-1.0 / self.ROOT) * np.eye(cols))

    def _instant(self, l, grads):
        G = _augmented(self.spec.layers[l], grads.weights[l], grads.biases[l])
        return G @ G.T, G.T @ G

    def _refresh_roots(self, l):
        eps = self.config.damping
        self.L_root[l] = inverse_pth_root(0.5 * (self.L[l] + self.L[l].T), self.ROOT, eps)
        self.R_root[l] = inverse_pth_root(0.5 * (self.R[l] + self.R[l].T), self.ROOT, eps)

    def warm_start(self, gradients):
        sums = None
        count = 0
        for grads in gradients:
            inst = [self._instant(l, grads) for l in range(len(self.spec.layers))]
            sums = inst if sums is None else [(a + x, b + y) for (a, b), (x, y) in zip(sums, inst)]
            count += 1
        if count == 0:
            return
        for l, (a, b) in enumerate(sums):
            self.L[l], self.R[l] = a / count, b / count
            self._refresh_roots(l)

    def precondition(self, l, mW, mb):
        layer = self.spec.layers[l]
        M = _augmented(layer, mW, mb)
        return _split_augmented(layer, self.L_root[l] @ M @ self.R_root[l])

    def _step(self, params, grads, lr):
        k = self.iteration
        beta = self.config.beta
        self._accumulate_momentum(grads)
        for l in range(len(self.spec.layers)):
            if k % self.config.T1 == 0:
                GG, GtG = self._instant(l, grads)
                self.L[l] = fisher.update_stats_ema(self.L[l], GG, beta)
                self.R[l] = fisher.update_stats_ema(self.R[l], GtG, beta)
            if k % self.config.T2 == 0:
                self._refresh_roots(l)
            dir_w, dir_b = self.precondition(l, self.mom_w[l], self.mom_b[l])
            self._apply(params, l, dir_w, dir_b, lr)

    def state_floats(self, l):
        return int(self.L[l].size + self.R[l].size)


_REGISTRY = {
    "sgdm": SGDM,
    "adam": Adam,
    "mbf": MBF,
    "mbf_generic": GenericMBF,
    "kfac": KFAC,
    "shampoo": Shampoo,
}


def make_optimizer(config: OptimizerConfig, spec: NetworkSpec) -> Optimizer:
    return _REGISTRY[config.method](spec, config)
