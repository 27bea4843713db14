#!/usr/bin/env python3
"""Build a small MNIST set in IDX format from the digits bundled with the npm
`mnist` package (10,000 real MNIST digits stored as JSON, pixels rounded to
three decimals, which still identifies every 8-bit level exactly).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_desk.py package/src/digits data/mnist-desk

Writes train-* (9,000 images) and t10k-* (1,000 images) as gzip IDX files.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def load(digits_dir):
    samples = []
    for label in range(10):
        flat = json.loads((Path(digits_dir) / f"{label}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for i in range(len(flat) // 784):
            pixels = bytes(round(v * 255) for v in flat[i * 784:(i + 1) * 784])
            samples.append((pixels, label))
    return samples


def write(out, prefix, samples):
    with gzip.GzipFile(out / f"{prefix}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), 28, 28))
        for pixels, _ in samples:
            f.write(pixels)
    with gzip.GzipFile(out / f"{prefix}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(label for _, label in samples))


def main():
    digits_dir, out = sys.argv[1], Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    samples = load(digits_dir)
    random.Random(20240101).shuffle(samples)
    write(out, "train", samples[:9000])
    write(out, "t10k", samples[9000:10000])
    print(f"wrote {len(samples[:9000])} train / {len(samples[9000:10000])} test to {out}")


if __name__ == "__main__":
    main()
