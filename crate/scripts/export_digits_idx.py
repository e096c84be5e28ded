"""Export scikit-learn's 8x8 handwritten digits to IDX files.

Pixels (0..16) are rescaled to 0..255. The split is stratified and
deterministic: for every class the first 80% of its samples (in the
library's native order) go to train, the remainder to test.
"""
import struct
import sys
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits


def write_images(path, images):
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digits = load_digits()
    images = np.rint(digits.images * 255.0 / 16.0).clip(0, 255).astype(np.uint8)
    labels = digits.target.astype(np.uint8)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        cut = int(round(0.8 * len(idx)))
        train_idx.extend(idx[:cut])
        test_idx.extend(idx[cut:])
    train_idx = np.sort(np.array(train_idx))
    test_idx = np.sort(np.array(test_idx))
    write_images(out / "train-images.idx3-ubyte", images[train_idx])
    write_labels(out / "train-labels.idx1-ubyte", labels[train_idx])
    write_images(out / "test-images.idx3-ubyte", images[test_idx])
    write_labels(out / "test-labels.idx1-ubyte", labels[test_idx])
    print(f"train={len(train_idx)} test={len(test_idx)}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures/digits")
