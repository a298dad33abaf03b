#!/usr/bin/env python3
"""Convert the per-digit JSON files of the `mnist` npm package into IDX files.

Usage: mnist_json_to_idx.py <package>/src/digits <out_dir>

Every fifth sample of each digit goes to the test split, the rest to train.
Both splits are shuffled with a fixed seed so labels are interleaved.
"""
import json
import random
import struct
import sys
from pathlib import Path

ROWS = COLS = 28


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), ROWS, COLS))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        n = len(data) // (ROWS * COLS)
        for i in range(n):
            chunk = data[i * ROWS * COLS:(i + 1) * ROWS * COLS]
            img = [min(255, max(0, int(round(v * 255)))) for v in chunk]
            (test if i % 5 == 4 else train).append((img, digit))
    rng = random.Random(20190909)
    for name, split in (("train", train), ("t10k", test)):
        rng.shuffle(split)
        write_images(out / f"{name}-images-idx3-ubyte", [s[0] for s in split])
        write_labels(out / f"{name}-labels-idx1-ubyte", [s[1] for s in split])
        print(name, len(split))


if __name__ == "__main__":
    main()
