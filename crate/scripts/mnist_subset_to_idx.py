#!/usr/bin/env python3
"""Convert the 10,000-digit MNIST sample shipped in the npm `mnist` package
into gzipped IDX files (8,000 train / 2,000 test, seeded split).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset_to_idx.py package/src/digits data/mnist
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

N_TRAIN = 8000
SEED = 20200917


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main(src, dst):
    samples = []
    for digit in range(10):
        data = json.loads(Path(src, f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for i in range(0, len(data), 784):
            pixels = bytes(round(v * 255) for v in data[i : i + 784])
            samples.append((pixels, digit))
    random.Random(SEED).shuffle(samples)
    splits = {"train": samples[:N_TRAIN], "t10k": samples[N_TRAIN:]}
    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in splits.items():
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 2051, [len(rows), 28, 28],
                  b"".join(p for p, _ in rows))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 2049, [len(rows)],
                  bytes(d for _, d in rows))
        print(name, len(rows))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
