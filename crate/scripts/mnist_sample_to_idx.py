#!/usr/bin/env python3
"""Convert the digit sample shipped in the `mnist` npm package (v1.1.0) into
gzipped IDX files with a fixed 8000/2000 train/test split.

usage: mnist_sample_to_idx.py <path to package/src/digits> <output dir>
"""
import gzip
import json
import os
import random
import struct
import sys


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + bytes(payload))


def main():
    src, out = sys.argv[1], sys.argv[2]
    samples = []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        for i in range(0, len(flat), 784):
            pixels = [min(255, max(0, round(v * 255))) for v in flat[i : i + 784]]
            samples.append((pixels, digit))

    random.Random(20210422).shuffle(samples)
    splits = {"train": samples[:8000], "t10k": samples[8000:]}
    os.makedirs(out, exist_ok=True)
    for name, part in splits.items():
        images = [p for pixels, _ in part for p in pixels]
        labels = [label for _, label in part]
        write_idx(os.path.join(out, f"{name}-images-idx3-ubyte.gz"), 0x803, [len(part), 28, 28], images)
        write_idx(os.path.join(out, f"{name}-labels-idx1-ubyte.gz"), 0x801, [len(part)], labels)
        print(name, len(part))


if __name__ == "__main__":
    main()
