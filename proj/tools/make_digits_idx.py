#!/usr/bin/env python3
"""Export the scikit-learn digits dataset (1797 8x8 images) as IDX files.

Produces the standard big-endian IDX pair (magic 2051 for images, 2049 for
labels) so the C++ loader can consume it. Pixel intensities 0..16 are
rescaled to 0..255 bytes. Written independently of the C++ code so the two
sides cross-check each other.
"""

import argparse
import struct
import sys
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits


def write_idx_images(path: Path, images: np.ndarray) -> None:
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir", type=Path)
    args = ap.parse_args()
    args.out_dir.mkdir(parents=True, exist_ok=True)

    digits = load_digits()
    images = np.round(digits.images / 16.0 * 255.0).astype(np.uint8)
    labels = digits.target

    write_idx_images(args.out_dir / "digits-images-idx3-ubyte", images)
    write_idx_labels(args.out_dir / "digits-labels-idx1-ubyte", labels)
    print(f"wrote {len(labels)} samples to {args.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
