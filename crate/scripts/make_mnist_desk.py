#!/usr/bin/env python3
"""Build the desk-scale MNIST subset used by the acceptance suite.

Reads the 5000-sample MNIST extract shipped inside the mlxtend wheel
(``mlxtend/data/data/mnist_5k.csv.gz``, 500 images per digit) and writes
a stratified, seeded 2000/3000 train/test split as IDX files.

    pip download --no-deps mlxtend -d /tmp/wheels
    python3 scripts/make_mnist_desk.py /tmp/wheels/mlxtend-*.whl data/mnist-desk
"""
import gzip
import random
import struct
import sys
import zipfile
from pathlib import Path

TRAIN_PER_CLASS = 200
SEED = 20231015


def write_idx(path, images, labels):
    rows, cols = 28, 28
    with open(path / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), rows, cols))
        for img in images:
            f.write(bytes(img))
    with open(path / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    wheel, out = sys.argv[1], Path(sys.argv[2])
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    by_class = {}
    for line in gzip.decompress(raw).decode().strip().split("\n"):
        vals = [int(v) for v in line.split(",")]
        by_class.setdefault(vals[-1], []).append(vals[:-1])
    rng = random.Random(SEED)
    train, test = [], []
    for label in sorted(by_class):
        imgs = by_class[label]
        rng.shuffle(imgs)
        train += [(img, label) for img in imgs[:TRAIN_PER_CLASS]]
        test += [(img, label) for img in imgs[TRAIN_PER_CLASS:]]
    rng.shuffle(train)
    rng.shuffle(test)
    for name, rows in (("train", train), ("test", test)):
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        write_idx(d, [r[0] for r in rows], [r[1] for r in rows])
        print(f"{name}: {len(rows)} samples -> {d}")


if __name__ == "__main__":
    main()
