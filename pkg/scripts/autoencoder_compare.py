"""Train the desk-scale autoencoder with every optimizer and tabulate the losses.

    python3 scripts/autoencoder_compare.py [--epochs 20] [--seed 0] [--mnist-dir DIR] [--out runs/autoencoder]

Each method uses its preset learning rate and default damping. Per-method run
logs and a summary table ``summary.csv`` are written to ``--out``.
"""

import argparse
from pathlib import Path

from mbf.config import preset
from mbf.train import train

METHODS = ("mbf", "adam", "sgdm", "kfac", "shampoo")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--epochs", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--mnist-dir")
    parser.add_argument("--out", default="runs/autoencoder")
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["method,lr,damping,initial_loss,final_loss,ratio,wall_s,failed"]
    for method in METHODS:
        overrides = {"epochs": args.epochs, "seed": args.seed, "output_dir": str(out)}
        if args.mnist_dir:
            overrides.update({"data.source": "mnist", "data.directory": args.mnist_dir})
        cfg = preset("autoencoder", method).replace(**overrides)
        rec = train(cfg)
        first, last = rec.rows[0], rec.rows[-1]
        lines.append(f"{method},{cfg.optimizer.lr:g},{cfg.optimizer.damping:g},{first.train_loss:.6g},"
                     f"{last.train_loss:.6g},{last.train_loss / first.train_loss:.4f},{last.wall_s:.2f},"
                     f"{int(rec.failed)}")
        print(lines[-1], flush=True)
    (out / "summary.csv").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
