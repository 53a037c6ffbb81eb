"""Command-line entry point: ``mbf <verb> [options]``.

Exit codes: 0 success, 2 configuration error, 3 run failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import yaml

from . import convergence
from .audit import storage_audit
from .config import MBF_AUTOENCODER_GRID, PRESETS, ExperimentConfig, load_config, preset
from .errors import (ConfigError, ConsistencyError, ExhaustiveFailureError, IdxFormatError,
                     RunFailure, TheoremPreconditionError)
from .export import export_heatmap, write_convergence_report
from .motivation import motivation_experiment
from .optim import METHODS
from .train import grid_search, train

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_IO = 0, 2, 3, 4


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_config_args(p, seed_required=False):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", help="YAML experiment file")
    src.add_argument("--preset", choices=PRESETS, help="bundled experiment preset")
    p.add_argument("--method", choices=METHODS, help="optimizer")
    p.add_argument("--lr", type=float)
    p.add_argument("--damping", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--mnist-dir", help="directory with the MNIST training IDX files")
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int, required=seed_required)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field by dotted key, e.g. optimizer.T2=50")


def resolve_config(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = preset(args.preset or "autoencoder", args.method or "mbf")
    overrides = {}
    if args.method:
        overrides["optimizer.method"] = args.method
        if not args.config and args.damping is None:
            overrides["optimizer.damping"] = None
    for flag, key in (("lr", "optimizer.lr"), ("damping", "optimizer.damping"),
                      ("weight_decay", "optimizer.weight_decay"), ("epochs", "epochs"),
                      ("batch_size", "batch_size"), ("output_dir", "output_dir"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "mnist_dir", None):
        overrides["data.source"] = "mnist"
        overrides["data.directory"] = args.mnist_dir
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = yaml.safe_load(value)
    return cfg.replace(**overrides) if overrides else cfg


def cmd_train(args):
    cfg = resolve_config(args)
    record = train(cfg)
    print("epoch,train_loss,val_loss,val_acc,wall_s,lr")
    for r in record.rows:
        print(f"{r.epoch},{r.train_loss:.6g},{r.val_loss},{r.val_acc},{r.wall_s:.3f},{r.lr:.3g}")
    if record.failed:
        print(f"run failed: {record.failure_reason}", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def cmd_grid_search(args):
    cfg = resolve_config(args)
    if args.mbf_grid:
        lrs, seconds, axis = MBF_AUTOENCODER_GRID["lr"], MBF_AUTOENCODER_GRID["damping"], "damping"
    else:
        lrs = args.lrs or [cfg.optimizer.lr]
        if args.weight_decays:
            seconds, axis = args.weight_decays, "weight_decay"
        else:
            seconds, axis = args.dampings or [cfg.optimizer.damping], "damping"
    result = grid_search(cfg, lrs, seconds, axis, args.criterion, workers=args.workers)
    print(f"lr,{axis},{args.criterion},failed")
    for c in result.table:
        print(f"{c.lr:g},{c.second:g},{'' if c.score is None else f'{c.score:.6g}'},{int(c.failed)}")
    print(f"best: lr={result.best.lr:g} {axis}={result.best.second:g} {args.criterion}={result.best.score:.6g}")
    if cfg.output_dir:
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        result.write_csv(Path(cfg.output_dir) / "grid.csv")
    return EXIT_OK


def cmd_fim_heatmap(args):
    if not args.preset and not args.config:
        args.preset = "classifier16"
    cfg = resolve_config(args)
    view = motivation_experiment(cfg, args.layer, args.fim_damping)
    path = export_heatmap(view.inverse, args.out, view.partition)
    print(f"layer {args.layer}: {len(view.partition.blocks)} mini-blocks, "
          f"in-block mean |H| = {view.in_block:.4g}, off-block mean |H| = {view.off_block:.4g}, "
          f"ratio = {view.ratio:.4g}")
    print(f"wrote {path} and {path}.blocks")
    return EXIT_OK


def cmd_converge_check(args):
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    passed_in = 0
    for seed in args.seeds:
        spec, p0, X, y = convergence.theorem_instance(args.widths, args.n, seed, args.target_noise)
        metrics = convergence.assumption_metrics(spec, p0, X, gram=args.gram)
        try:
            lam, eta = convergence.suggest_damping_and_lr(metrics.lam0, args.n, metrics.K, args.C)
        except TheoremPreconditionError as exc:
            print(f"seed {seed}: lambda0={metrics.lam0:.4g} K={metrics.K}: {exc}")
            continue
        eta = min(eta, args.max_lr)
        report = convergence.run_exact_mbf(spec, p0, X, y, lam, eta, args.iters, args.C,
                                           gram=args.gram, lam0=metrics.lam0)
        ok, first = convergence.verify_linear_rate(report, eta, args.slack * report.residuals[0])
        status = "in-hypothesis" if report.in_hypothesis else "out-of-hypothesis"
        print(f"seed {seed}: lambda0={metrics.lam0:.4g} K={metrics.K} lambda={lam:.4g} eta={eta:.4g} "
              f"r0={report.residuals[0]:.4g} r_end={report.residuals[-1]:.4g} "
              f"bound={'pass' if ok else f'fail at k={first}'} {status}")
        if ok and report.in_hypothesis:
            passed_in += 1
        if out:
            write_convergence_report(report, out / f"converge_seed{seed}.csv")
    print(f"{passed_in}/{len(args.seeds)} seeds in-hypothesis and passing")
    return EXIT_OK if passed_in >= args.require else EXIT_RUN


def cmd_storage_audit(args):
    cfg = resolve_config(args)
    audit = storage_audit(cfg.network.build(), cfg.optimizer)
    print(f"optimizer: {audit.method}")
    print(audit.table())
    return EXIT_OK if audit.all_match else EXIT_RUN


def build_parser():
    parser = argparse.ArgumentParser(prog="mbf", description="Mini-block Fisher experiments")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="run one configured training run")
    _add_config_args(p, seed_required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid-search", help="learning rate x damping (or weight decay) search")
    _add_config_args(p)
    p.add_argument("--lrs", type=_floats)
    p.add_argument("--dampings", type=_floats)
    p.add_argument("--weight-decays", type=_floats)
    p.add_argument("--mbf-grid", action="store_true", help="use the bundled MBF autoencoder grid")
    p.add_argument("--criterion", choices=("train_loss", "val_acc"), default="train_loss")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_grid_search)

    p = sub.add_parser("fim-heatmap", help="train, then export a layer's inverse empirical FIM")
    _add_config_args(p)
    p.add_argument("--layer", type=int, default=2)
    p.add_argument("--fim-damping", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fim_heatmap)

    p = sub.add_parser("converge-check", help="exact mini-block NGD linear-rate check")
    p.add_argument("--widths", type=_ints, default=[4, 8, 1])
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2, 3, 4])
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--gram", choices=convergence.GRAM_MODES, default="sample")
    p.add_argument("--target-noise", type=float, default=1e-4)
    p.add_argument("--C", type=float, default=0.5)
    p.add_argument("--max-lr", type=float, default=0.05)
    p.add_argument("--slack", type=float, default=1e-9, help="slack relative to r0")
    p.add_argument("--require", type=int, default=3, help="seeds that must pass in-hypothesis")
    p.add_argument("--out", help="directory for per-seed reports")
    p.set_defaults(func=cmd_converge_check)

    p = sub.add_parser("storage-audit", help="preconditioner float counts vs. formulas")
    _add_config_args(p)
    p.set_defaults(func=cmd_storage_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IdxFormatError, ConsistencyError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ExhaustiveFailureError as exc:
        print(f"run failure: {exc}", file=sys.stderr)
        return EXIT_RUN
    except (RunFailure, ArithmeticError, TheoremPreconditionError) as exc:
        print(f"run failure: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
