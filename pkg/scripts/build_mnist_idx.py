"""Convert the digits bundled with the npm ``mnist`` package into IDX files.

The sandbox has no route to the usual MNIST mirrors, but the npm registry
serves ``mnist@1.1.0``, which ships 10,000 original MNIST digits as JSON
arrays of ``pixel / 255`` rounded to three decimals. This script rebuilds the
uint8 pixels, shuffles with a fixed seed and writes gzipped IDX3/IDX1 pairs.

Usage::

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python scripts/build_mnist_idx.py package/src/digits data/mnist
"""

import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def main(src: str, dst: str, n_train: int = 8000, seed: int = 20210101) -> None:
    images, labels = [], []
    for digit in range(10):
        raw = np.asarray(json.loads(Path(src, f"{digit}.json").read_text())["data"])
        pix = np.rint(raw * 255).clip(0, 255).astype(np.uint8).reshape(-1, 784)
        images.append(pix)
        labels.append(np.full(len(pix), digit, dtype=np.uint8))
    x = np.concatenate(images)
    y = np.concatenate(labels)
    order = np.random.default_rng(seed).permutation(len(y))
    x, y = x[order], y[order]
    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    for name, sl in (("train", slice(0, n_train)), ("t10k", slice(n_train, None))):
        xs, ys = x[sl], y[sl]
        with gzip.GzipFile(out / f"{name}-images-idx3-ubyte.gz", "wb", mtime=0) as fh:
            fh.write(struct.pack(">IIII", 0x00000803, len(xs), 28, 28))
            fh.write(xs.tobytes())
        with gzip.GzipFile(out / f"{name}-labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
            fh.write(struct.pack(">II", 0x00000801, len(ys)))
            fh.write(ys.tobytes())
        print(name, len(ys), np.bincount(ys, minlength=10))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
