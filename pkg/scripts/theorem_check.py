"""Linear-rate check of exact mini-block NGD on small single-output tanh networks.

    python3 scripts/theorem_check.py [--out runs/theorem]

Runs the 4-8-1 network at n = 20 under both block-Gram readings and at
n = 4, where every block has at least as many parameters as there are
samples. Per-seed iteration reports go to ``--out``.
"""

import argparse
import sys

from mbf import cli

RUNS = (
    ("n20_sample", ["--n", "20", "--gram", "sample"]),
    ("n20_smaller_gram", ["--n", "20", "--gram", "auto"]),
    ("n4_sample", ["--n", "4", "--gram", "sample"]),
)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/theorem")
    args = parser.parse_args()
    codes = []
    for name, flags in RUNS:
        print(f"== {name}")
        codes.append(cli.main(["converge-check", *flags, "--out", f"{args.out}/{name}"]))
    sys.exit(max(codes))


if __name__ == "__main__":
    main()
