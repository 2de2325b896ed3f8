#!/usr/bin/env python
"""Build the Fashion-MNIST proxy subset used by the acceptance experiment.

The images come from the ``fashion-mnist`` npm package, which ships the
70,000 Fashion-MNIST images as one JSON file per class. Per class we keep
images [0, 1000) for training and [6000, 6200) for testing, shuffle each split
with a fixed seed and write gzipped IDX files.

Usage:
    python scripts/make_fashion_proxy.py [--tarball fashion-mnist-1.1.0.tgz] [--out data/fashion_proxy]
"""

import argparse
import io
import json
import tarfile
import urllib.request
from pathlib import Path

import numpy as np

from occdistill.data import write_idx

URL = "https://registry.npmjs.org/fashion-mnist/-/fashion-mnist-1.1.0.tgz"


def load_classes(tarball):
    if tarball is None:
        with urllib.request.urlopen(URL, timeout=300) as resp:
            blob = resp.read()
    else:
        blob = Path(tarball).read_bytes()
    classes = {}
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
        for k in range(10):
            fh = tar.extractfile(f"package/src/clothes/{k}.json")
            rows = [r for r in json.load(fh)["data"] if len(r) == 784]
            classes[k] = np.asarray(rows, dtype=np.uint8).reshape(-1, 28, 28)
    return classes


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--tarball", default=None)
    ap.add_argument("--out", default="data/fashion_proxy")
    ap.add_argument("--train-per-class", type=int, default=1000)
    ap.add_argument("--test-per-class", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    classes = load_classes(args.tarball)
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, lo, n in [("train", 0, args.train_per_class), ("t10k", 6000, args.test_per_class)]:
        x = np.concatenate([classes[k][lo : lo + n] for k in range(10)])
        y = np.repeat(np.arange(10, dtype=np.uint8), n)
        perm = rng.permutation(len(y))
        write_idx(out / f"{name}-images-idx3-ubyte.gz", x[perm])
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", y[perm])
        print(f"{name}: {len(y)} images -> {out}")


if __name__ == "__main__":
    main()
