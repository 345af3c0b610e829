"""Convert the UCI 8x8 handwritten digits (bundled with scikit-learn) to IDX files.

Pixel intensities 0..16 are rescaled to 0..255. The split is stratified 80/20
per class with a fixed seed so the fixture is reproducible.
"""
import gzip
import os
import struct
import sys

import numpy as np
import sklearn

out = sys.argv[1] if len(sys.argv) > 1 else "data/digits"
src = os.path.join(os.path.dirname(sklearn.__file__), "datasets", "data", "digits.csv.gz")
raw = np.loadtxt(gzip.open(src), delimiter=",")
pixels = np.rint(raw[:, :64] * 255.0 / 16.0).astype(np.uint8)
labels = raw[:, 64].astype(np.uint8)

rng = np.random.default_rng(20240611)
train_idx, test_idx = [], []
for c in range(10):
    idx = np.flatnonzero(labels == c)
    rng.shuffle(idx)
    n_test = int(round(0.2 * len(idx)))
    test_idx.extend(idx[:n_test])
    train_idx.extend(idx[n_test:])
train_idx = np.sort(np.array(train_idx))
test_idx = np.sort(np.array(test_idx))


def write(prefix, idx):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, f"{prefix}-images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(idx), 8, 8))
        f.write(pixels[idx].tobytes())
    with open(os.path.join(out, f"{prefix}-labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(idx)))
        f.write(labels[idx].tobytes())


write("train", train_idx)
write("t10k", test_idx)
print(f"train={len(train_idx)} test={len(test_idx)}")
