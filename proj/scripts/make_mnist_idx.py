#!/usr/bin/env python3
"""Build desk-scale MNIST IDX files from the digits bundled in the npm `mnist` package.

The package ships 10,000 MNIST digits as per-class JSON arrays of pixel/255
rounded to three decimals; rounding back to bytes is exact because the byte
grid spacing (1/255) is wider than the rounding error (5e-4).

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/make_mnist_idx.py package/src/digits data/mnist
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np

TRAIN_COUNT = 8000
SHUFFLE_SEED = 20180901


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload.tobytes())


def main(src, dst):
    src, dst = Path(src), Path(dst)
    images, labels = [], []
    for digit in range(10):
        raw = np.asarray(json.loads((src / f"{digit}.json").read_text())["data"])
        count = raw.size // 784
        images.append(np.rint(raw.reshape(count, 784) * 255.0).astype(np.uint8))
        labels.append(np.full(count, digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(SHUFFLE_SEED).permutation(len(labels))
    images, labels = images[order], labels[order]

    dst.mkdir(parents=True, exist_ok=True)
    splits = {"train": slice(0, TRAIN_COUNT), "t10k": slice(TRAIN_COUNT, None)}
    for name, sl in splits.items():
        n = len(labels[sl])
        write_idx(dst / f"{name}-images-idx3-ubyte.gz", 0x803, (n, 28, 28), images[sl])
        write_idx(dst / f"{name}-labels-idx1-ubyte.gz", 0x801, (n,), labels[sl])
        print(name, n, np.bincount(labels[sl], minlength=10).tolist())


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
