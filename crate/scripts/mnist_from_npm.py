#!/usr/bin/env python3
"""Build gzipped IDX files from the digit JSON shipped in the npm `mnist` package.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist

The package carries 10,000 MNIST digits stored as floats (pixel / 255 rounded to
three decimals). They are shuffled with a fixed seed and split 8000 / 2000 into
the `train-*` and `t10k-*` files.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

PIXELS = 28 * 28


def main(src: Path, dst: Path) -> None:
    samples = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        for start in range(0, len(data), PIXELS):
            pixels = bytes(round(v * 255) for v in data[start : start + PIXELS])
            samples.append((pixels, digit))
    random.Random(0).shuffle(samples)

    dst.mkdir(parents=True, exist_ok=True)
    for prefix, part in (("train", samples[:8000]), ("t10k", samples[8000:])):
        with gzip.GzipFile(dst / f"{prefix}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x803, len(part), 28, 28))
            for pixels, _ in part:
                f.write(pixels)
        with gzip.GzipFile(dst / f"{prefix}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">II", 0x801, len(part)))
            f.write(bytes(label for _, label in part))


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
