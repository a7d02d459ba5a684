#!/usr/bin/env python3
"""Rebuild IDX-format MNIST files from the digit arrays bundled in the npm
`mnist` package (10,000 real MNIST digits, pixel values stored as byte/255
rounded to three decimals).

Usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 scripts/mnist_from_npm.py package/src/digits data/mnist

Per digit, the first 80% of samples go to the train split and the rest to
the test split; each split is then shuffled with a fixed seed.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_split(out: Path, prefix: str, samples):
    images = bytearray(struct.pack(">IIII", 0x00000803, len(samples), 28, 28))
    labels = bytearray(struct.pack(">II", 0x00000801, len(samples)))
    for pixels, label in samples:
        images.extend(pixels)
        labels.append(label)
    with gzip.GzipFile(out / f"{prefix}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(images)
    with gzip.GzipFile(out / f"{prefix}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(labels)


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        n = len(data) // 784
        rows = []
        for i in range(n):
            px = data[i * 784:(i + 1) * 784]
            b = bytes(min(255, max(0, round(v * 255))) for v in px)
            rows.append((b, digit))
        cut = (n * 4) // 5
        train.extend(rows[:cut])
        test.extend(rows[cut:])
    rng = random.Random(20240521)
    rng.shuffle(train)
    rng.shuffle(test)
    write_split(out, "train", train)
    write_split(out, "t10k", test)
    print(f"train={len(train)} test={len(test)}")


if __name__ == "__main__":
    main()
