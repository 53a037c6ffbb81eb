"""Build the bundled MNIST-format digit fixture from scikit-learn's 8x8 digits.

Each 8x8 digit is upsampled to a 20x20 box and centred in a 28x28 frame, as
MNIST digits are. Two extra copies per digit with random shifts of up to two
pixels enlarge the set to 5391 images. Output: uint8 IDX files, gzipped.

    python3 scripts/make_digit_fixture.py [--out src/mbf/fixtures] [--seed 0]
"""

import argparse
from pathlib import Path

import numpy as np
from scipy.ndimage import shift, zoom
from sklearn.datasets import load_digits

from mbf.data import FIXTURE_IMAGES, FIXTURE_LABELS, write_idx


def build(seed=0, copies=3):
    digits = load_digits()
    rng = np.random.default_rng(seed)
    base = []
    for img in digits.images / 16.0:
        box = np.clip(zoom(img, 20 / 8, order=1), 0.0, 1.0)
        frame = np.zeros((28, 28))
        frame[4:24, 4:24] = box
        base.append(frame)
    base = np.array(base)
    images, labels = [base], [digits.target]
    for _ in range(copies - 1):
        offsets = rng.integers(-2, 3, size=(len(base), 2))
        moved = np.array([shift(b, o, order=0) for b, o in zip(base, offsets)])
        images.append(moved)
        labels.append(digits.target)
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = rng.permutation(len(images))
    return (np.round(images[order] * 255)).astype(np.uint8), labels[order].astype(np.uint8)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "src/mbf/fixtures"))
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    images, labels = build(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / FIXTURE_IMAGES, images)
    write_idx(out / FIXTURE_LABELS, labels)
    print(f"wrote {len(images)} digits to {out}")


if __name__ == "__main__":
    main()
