#!/usr/bin/env python3
"""Build a small MNIST subset in IDX format from the digits bundled in the
`mnist` npm package (10,000 real MNIST digits stored as JSON).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/make_mnist_subset.py package/src/digits data/mnist-subset

Writes gzipped IDX files named like the official distribution:
train-images-idx3-ubyte.gz (8,000), t10k-images-idx3-ubyte.gz (2,000) and
the matching label files. The split is stratified and seeded.
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np

TEST_PER_CLASS_FRACTION = 0.2


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    rng = np.random.RandomState(20190101)
    train_x, train_y, test_x, test_y = [], [], [], []
    for digit in range(10):
        data = np.array(json.loads((src / f"{digit}.json").read_text())["data"])
        images = np.rint(data.reshape(-1, 784) * 255).astype(np.uint8)
        order = rng.permutation(len(images))
        n_test = int(round(len(images) * TEST_PER_CLASS_FRACTION))
        test_x.append(images[order[:n_test]])
        test_y += [digit] * n_test
        train_x.append(images[order[n_test:]])
        train_y += [digit] * (len(images) - n_test)
    for split, xs, ys in (("train", train_x, train_y), ("t10k", test_x, test_y)):
        x = np.concatenate(xs)
        y = np.array(ys, dtype=np.uint8)
        perm = rng.permutation(len(y))
        x, y = x[perm], y[perm]
        write_idx(dst / f"{split}-images-idx3-ubyte.gz", 0x803, (len(y), 28, 28), x.tobytes())
        write_idx(dst / f"{split}-labels-idx1-ubyte.gz", 0x801, (len(y),), y.tobytes())
        print(split, len(y), np.bincount(y))


if __name__ == "__main__":
    main()
