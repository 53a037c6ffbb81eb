"""Training runs and grid search."""

from __future__ import annotations

import itertools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import data as datasets
from .config import ExperimentConfig
from .errors import ConfigError, ExhaustiveFailureError, MBFError
from .nn import Params, evaluate, init_params, loss_and_gradients
from .optim import LrSchedule, make_optimizer

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_acc", "wall_s", "lr")


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: Optional[float]
    val_acc: Optional[float]
    wall_s: float  # cumulative optimization time, evaluation and warm start excluded
    lr: float


@dataclass
class RunRecord:
    config: dict
    rows: List[EpochRow] = field(default_factory=list)
    failed: bool = False
    failure_reason: Optional[str] = None
    params: Optional[Params] = field(default=None, repr=False)

    @property
    def last_good_epoch(self) -> Optional[int]:
        return self.rows[-1].epoch if self.rows else None

    @property
    def final_loss(self) -> float:
        return self.rows[-1].train_loss

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def write_csv(self, path) -> Path:
        """Run log: a ``#``-prefixed JSON header with the resolved config, then one row per epoch."""
        path = Path(path)
        meta = {"config": self.config, "failed": self.failed, "failure_reason": self.failure_reason}
        lines = ["# " + json.dumps(meta, sort_keys=True), ",".join(LOG_COLUMNS)]
        for r in self.rows:
            vals = [str(r.epoch)] + ["" if v is None else repr(float(v))
                                     for v in (r.train_loss, r.val_loss, r.val_acc, r.wall_s, r.lr)]
            lines.append(",".join(vals))
        try:
            path.write_text("\n".join(lines) + "\n")
        except OSError as exc:
            raise OSError(f"cannot write run log {path}: {exc}") from exc
        return path


def read_run_log(path) -> RunRecord:
    lines = Path(path).read_text().splitlines()
    meta = json.loads(lines[0][2:])
    rows = []
    for line in lines[2:]:
        parts = line.split(",")
        vals = [None if p == "" else float(p) for p in parts[1:]]
        rows.append(EpochRow(int(parts[0]), *vals))
    return RunRecord(meta["config"], rows, meta["failed"], meta["failure_reason"])


def load_dataset(config: ExperimentConfig) -> datasets.Batch:
    """Resolve the configured data source into a seeded training batch."""
    d = config.data
    if d.source == "synthetic":
        batch = datasets.synth_dataset(d.kind, d.n, d.seed, d=d.d)
    else:
        if d.source == "fixture":
            batch = datasets.load_digits()
        elif d.source == "mnist":
            batch = datasets.load_digits(d.directory)
        else:
            batch = datasets.load_idx(d.images, d.labels)
        if d.n is not None:
            if d.n > len(batch):
                raise ConfigError(f"data.n = {d.n} exceeds the {len(batch)} available samples")
            rng = np.random.default_rng(d.seed)
            batch = batch.subset(np.sort(rng.choice(len(batch), d.n, replace=False)))
        if d.downscale:
            side = int(round(math.sqrt(batch.X.shape[1])))
            X = datasets.downscale(batch.X.reshape(-1, side, side), d.downscale).reshape(len(batch), -1)
            Y = X.copy() if batch.labels is None else batch.Y
            batch = datasets.Batch(X, Y, batch.labels)
    if d.autoencoder:
        batch = datasets.Batch(batch.X, batch.X.copy(), batch.labels)
    return batch


def split_validation(batch: datasets.Batch, fraction, seed):
    if fraction <= 0:
        return batch, None
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(batch))
    n_val = max(1, int(round(fraction * len(batch))))
    return batch.subset(np.sort(perm[n_val:])), batch.subset(np.sort(perm[:n_val]))


def _batches(n, m, order):
    return [order[i:i + m] for i in range(0, n, m)]


def _finite(x):
    return x is None or math.isfinite(x)


def _run_epoch(params, spec, opt, train_set, batch_size, order, lr, per_sample):
    """One pass over ``order``; returns True if a mini-batch loss was non-finite."""
    for idx in _batches(len(train_set), batch_size, order):
        loss, grads = loss_and_gradients(params, spec, train_set.X[idx], train_set.Y[idx],
                                         per_sample=per_sample)
        if not math.isfinite(loss):
            return True
        opt.step(params, grads, lr)
    return False


def train(config: ExperimentConfig, data: Optional[datasets.Batch] = None,
          params: Optional[Params] = None) -> RunRecord:
    """Mini-batch training with per-epoch evaluation.

    The epoch-0 row evaluates the initial parameters. Epoch ``e`` trains with
    learning rate ``schedule(e - 1)`` on a seeded shuffle of the training set.
    A non-finite loss or a numerical failure inside the optimizer ends the
    run; the record then keeps the rows up to the last good epoch.
    """
    config.validate()
    spec = config.network.build()
    batch = load_dataset(config) if data is None else data
    train_set, val_set = split_validation(batch, config.data.val_fraction, config.data.seed)
    n = len(train_set)
    if config.batch_size > n:
        raise ConfigError(f"batch_size {config.batch_size} exceeds the {n} training samples")
    if train_set.X.shape[1] != spec.input_dim or train_set.Y.shape[1] != spec.output_dim:
        raise ConfigError(
            f"data shapes {train_set.X.shape[1]}->{train_set.Y.shape[1]} do not fit the network "
            f"{spec.input_dim}->{spec.output_dim}"
        )
    params = init_params(spec, config.seed) if params is None else params.copy()
    opt = make_optimizer(config.optimizer, spec)
    schedule = LrSchedule(config.optimizer.lr, config.lr_decay_period, config.lr_decay_factor)
    record = RunRecord(config.to_dict(), params=params)
    rng = np.random.default_rng(config.seed)
    per_sample = opt.needs_per_sample

    def eval_row(epoch, wall, lr):
        loss, _ = evaluate(params, spec, train_set.X, train_set.Y)
        vl = va = None
        if val_set is not None:
            vl, va = evaluate(params, spec, val_set.X, val_set.Y)
        return EpochRow(epoch, loss, vl, va, wall, lr)

    def fail(reason):
        record.failed = True
        record.failure_reason = reason
        return record

    row = eval_row(0, 0.0, schedule(0))
    if not (_finite(row.train_loss) and _finite(row.val_loss)):
        return fail("non-finite loss at initialization")
    record.rows.append(row)
    if config.warm_start and config.epochs > 0:
        order = np.arange(n)
        opt.warm_start(
            loss_and_gradients(params, spec, train_set.X[idx], train_set.Y[idx])[1]
            for idx in _batches(n, config.batch_size, order)
        )
    wall = 0.0
    for epoch in range(1, config.epochs + 1):
        lr = schedule(epoch - 1)
        order = rng.permutation(n)
        start = time.perf_counter()
        try:
            # overflow is detected through the finiteness checks below
            with np.errstate(over="ignore", invalid="ignore"):
                epoch_failure = _run_epoch(params, spec, opt, train_set, config.batch_size, order, lr,
                                           per_sample)
            if epoch_failure:
                return fail(f"diverged: non-finite mini-batch loss in epoch {epoch}")
        except (MBFError, ArithmeticError, np.linalg.LinAlgError) as exc:
            return fail(f"numerical failure in epoch {epoch}: {exc}")
        wall += time.perf_counter() - start
        with np.errstate(all="ignore"):
            row = eval_row(epoch, wall, lr)
        if not (_finite(row.train_loss) and _finite(row.val_loss) and np.all(np.isfinite(params.flat()))):
            return fail(f"diverged: non-finite loss after epoch {epoch}")
        record.rows.append(row)
    if config.output_dir:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        record.write_csv(out / f"run_{config.optimizer.method}_seed{config.seed}.csv")
    return record


# -- grid search -----------------------------------------------------------------

@dataclass
class GridCell:
    lr: float
    second: float
    score: Optional[float]
    failed: bool
    failure_reason: Optional[str] = None


@dataclass
class GridResult:
    axis: str
    criterion: str
    best: GridCell
    table: List[GridCell]

    def write_csv(self, path) -> Path:
        lines = [f"lr,{self.axis},{self.criterion},failed"]
        for c in self.table:
            lines.append(f"{c.lr!r},{c.second!r},{'' if c.score is None else repr(c.score)},{int(c.failed)}")
        Path(path).write_text("\n".join(lines) + "\n")
        return Path(path)


def _run_cell(args):
    config, data, lr, second, axis, criterion = args
    cfg = config.replace(**{"optimizer.lr": lr, f"optimizer.{axis}": second, "output_dir": None})
    try:
        rec = train(cfg, data)
    except (MBFError, ArithmeticError) as exc:
        return GridCell(lr, second, None, True, str(exc))
    if rec.failed:
        return GridCell(lr, second, None, True, rec.failure_reason)
    last = rec.rows[-1]
    score = last.train_loss if criterion == "train_loss" else last.val_acc
    if score is None:
        return GridCell(lr, second, None, True, "no validation split for val_acc")
    return GridCell(lr, second, float(score), False)


def grid_search(config: ExperimentConfig, lrs, second_values, axis="damping",
                criterion="train_loss", data=None, workers=1) -> GridResult:
    """Evaluate every ``(lr, axis value)`` pair with the config's fixed seed.

    ``criterion`` is ``train_loss`` (minimized) or ``val_acc`` (maximized).
    Ties go to the smaller learning rate, then the smaller second value.
    """
    if not lrs or not second_values:
        raise ConfigError("grid axes must be nonempty")
    if axis not in ("damping", "weight_decay"):
        raise ConfigError(f"second grid axis must be damping or weight_decay, got {axis!r}")
    if criterion not in ("train_loss", "val_acc"):
        raise ConfigError(f"unknown selection criterion {criterion!r}")
    config.validate()
    if data is None:
        data = load_dataset(config)
    jobs = [(config, data, float(lr), float(v), axis, criterion)
            for lr, v in itertools.product(sorted(lrs), sorted(second_values))]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            table = list(pool.map(_run_cell, jobs))
    else:
        table = [_run_cell(j) for j in jobs]
    ok = [c for c in table if not c.failed]
    if not ok:
        raise ExhaustiveFailureError(f"all {len(table)} grid cells failed", table)
    sign = 1.0 if criterion == "train_loss" else -1.0
    best = min(ok, key=lambda c: (sign * c.score, c.lr, c.second))
    return GridResult(axis, criterion, best, table)


def record_summary(record: RunRecord) -> dict:
    return {"failed": record.failed, "failure_reason": record.failure_reason,
            "rows": [asdict(r) for r in record.rows]}
