#!/usr/bin/env python3
"""Convert the digit JSON files of the `mnist` npm package to IDX files.

The package ships 10,000 MNIST digits as {"data": [...]} arrays of 784
floats in [0, 1] per digit class. This script restores the byte pixels,
shuffles with a fixed seed and writes train/test IDX pairs.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 mnist_json_to_idx.py package/src/digits data/mnist
"""
import argparse
import json
import pathlib
import random
import struct

PIXELS = 28 * 28


def load_digits(src):
    images, labels = [], []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        if len(flat) % PIXELS:
            raise SystemExit(f"{digit}.json: length {len(flat)} is not a multiple of {PIXELS}")
        for start in range(0, len(flat), PIXELS):
            images.append(bytes(round(v * 255) for v in flat[start:start + PIXELS]))
            labels.append(digit)
    return images, labels


def write_pair(out, prefix, images, labels):
    with open(out / f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        f.write(b"".join(images))
    with open(out / f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("src", type=pathlib.Path, help="directory holding 0.json .. 9.json")
    ap.add_argument("out", type=pathlib.Path)
    ap.add_argument("--train", type=int, default=6000)
    ap.add_argument("--seed", type=int, default=20190)
    args = ap.parse_args()

    images, labels = load_digits(args.src)
    order = list(range(len(images)))
    random.Random(args.seed).shuffle(order)
    images = [images[i] for i in order]
    labels = [labels[i] for i in order]
    args.out.mkdir(parents=True, exist_ok=True)
    write_pair(args.out, "train", images[:args.train], labels[:args.train])
    write_pair(args.out, "t10k", images[args.train:], labels[args.train:])
    print(f"wrote {args.train} train and {len(images) - args.train} test digits to {args.out}")


if __name__ == "__main__":
    main()
