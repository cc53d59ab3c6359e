#!/usr/bin/env python3
"""Build IDX files from the 10,000-digit MNIST subset shipped in the npm `mnist` package.

The canonical MNIST mirrors are not always reachable; the npm package bundles
real MNIST digits as JSON (intensities already divided by 255 and rounded to
three decimals). This script converts them back to bytes, makes a stratified
train/test split, shuffles each split with a fixed seed and writes the four
standard IDX files.

    python3 tools/prepare_mnist.py --out data/mnist
"""
import argparse
import json
import os
import random
import struct
import subprocess
import tarfile
import tempfile


def locate_package(explicit):
    if explicit:
        return explicit
    work = tempfile.mkdtemp(prefix="mnist-npm-")
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=work, check=True,
                   stdout=subprocess.DEVNULL)
    tgz = os.path.join(work, "mnist-1.1.0.tgz")
    with tarfile.open(tgz) as tar:
        tar.extractall(work)
    return os.path.join(work, "package")


def write_idx_images(path, images, rows, cols):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), rows, cols))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--package", help="extracted npm package directory")
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--test-fraction", type=float, default=0.15)
    ap.add_argument("--seed", type=int, default=20200823)
    args = ap.parse_args()

    pkg = locate_package(args.package)
    rng = random.Random(args.seed)
    train, test = [], []
    for digit in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{digit}.json")) as f:
            raw = json.load(f)["data"]
        count = len(raw) // 784
        samples = []
        for i in range(count):
            px = raw[i * 784:(i + 1) * 784]
            samples.append(([min(255, max(0, round(v * 255))) for v in px], digit))
        rng.shuffle(samples)
        n_test = round(count * args.test_fraction)
        test.extend(samples[:n_test])
        train.extend(samples[n_test:])
    rng.shuffle(train)
    rng.shuffle(test)

    os.makedirs(args.out, exist_ok=True)
    for name, split in (("train", train), ("t10k", test)):
        write_idx_images(os.path.join(args.out, f"{name}-images-idx3-ubyte"),
                         [s[0] for s in split], 28, 28)
        write_idx_labels(os.path.join(args.out, f"{name}-labels-idx1-ubyte"),
                         [s[1] for s in split])
    print(f"wrote {len(train)} train / {len(test)} test images to {args.out}")


if __name__ == "__main__":
    main()
