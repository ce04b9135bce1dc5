#!/usr/bin/env python3
"""Convert the digits bundled in the `mnist` npm package (v1.1.0) to IDX files.

Usage: npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
       python3 scripts/mnist_npm_to_idx.py package/src/digits data/mnist-subset

The package stores 1000 digits per class as floats rounded to three decimals;
round(v * 255) recovers the original bytes. Samples are interleaved with a
fixed permutation and split 8000 train / 2000 test.
"""
import json
import random
import struct
import sys
from pathlib import Path

src, dst = Path(sys.argv[1]), Path(sys.argv[2])
dst.mkdir(parents=True, exist_ok=True)
samples = []
for label in range(10):
    raw = json.loads((src / f"{label}.json").read_text())["data"]
    n = len(raw) // 784
    for i in range(n):
        px = bytes(min(255, max(0, round(v * 255))) for v in raw[i * 784:(i + 1) * 784])
        samples.append((px, label))
random.Random(20260101).shuffle(samples)
split = len(samples) - 2000
for name, part in (("train", samples[:split]), ("t10k", samples[split:])):
    with open(dst / f"{name}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(part), 28, 28))
        for px, _ in part:
            f.write(px)
    with open(dst / f"{name}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(part)))
        f.write(bytes(l for _, l in part))
    print(name, len(part))
