"""Export inverse empirical-FIM heatmaps for the dense classifier and the small CNN.

    python3 scripts/motivation_heatmaps.py [--damping 1e-3] [--out runs/heatmaps]

The classifier is trained with SGD-m and its middle dense layer inspected;
the CNN is trained with MBF and its conv layer inspected (kernel weights
only, so the 32 kernel blocks tile the matrix). Each heatmap comes with a
``.blocks`` file of block boundaries; the block mass ratios are printed.
"""

import argparse
from pathlib import Path

from mbf.config import preset
from mbf.export import export_heatmap
from mbf.motivation import motivation_experiment

CASES = (("classifier16", "sgdm", 2), ("simple_cnn", "mbf", 0))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--damping", type=float, default=1e-3)
    parser.add_argument("--out", default="runs/heatmaps")
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, method, layer in CASES:
        view = motivation_experiment(preset(name, method), layer, args.damping)
        path = export_heatmap(view.inverse, out / f"{name}_layer{layer}.csv", view.partition)
        print(f"{name} layer {layer}: {len(view.partition)} blocks, in-block {view.in_block:.4g}, "
              f"off-block {view.off_block:.4g}, ratio {view.ratio:.4g} -> {path}")


if __name__ == "__main__":
    main()
