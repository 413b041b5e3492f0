#!/usr/bin/env python3
"""Writes the scikit-learn 8x8 digits as MNIST-style IDX files.

Two variants are produced:
  digits-*        the images as shipped (0..16 rescaled to 0..255)
  mixed-digits-*  the same split with half of the images inverted (x -> 255 - x),
                  so that stroke polarity varies between samples
"""

import argparse
import struct
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits


def write_idx(path, array, magic):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in array.shape:
            f.write(struct.pack(">I", d))
        f.write(array.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "tests" / "data"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--test-fraction", type=float, default=0.2)
    args = ap.parse_args()

    digits = load_digits()
    images = np.rint(digits.images * (255.0 / 16.0)).astype(np.uint8)
    labels = digits.target.astype(np.uint8)

    rng = np.random.RandomState(args.seed)
    order = rng.permutation(len(labels))
    n_test = int(round(args.test_fraction * len(labels)))
    split = {"test": order[:n_test], "train": order[n_test:]}
    flip = rng.rand(len(labels)) < 0.5

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, idx in split.items():
        write_idx(out / f"digits-{name}-images.idx", images[idx], 0x803)
        write_idx(out / f"digits-{name}-labels.idx", labels[idx], 0x801)
        mixed = np.where(flip[idx, None, None], 255 - images[idx], images[idx])
        write_idx(out / f"mixed-digits-{name}-images.idx", mixed, 0x803)
        write_idx(out / f"mixed-digits-{name}-labels.idx", labels[idx], 0x801)
        print(f"{name}: {len(idx)} samples")


if __name__ == "__main__":
    main()
