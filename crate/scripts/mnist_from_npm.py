#!/usr/bin/env python3
"""Convert the digit JSON files of the `mnist` npm package into a gzipped
IDX image/label pair.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import argparse
import gzip
import json
import struct
from pathlib import Path

SIDE = 28


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    args = ap.parse_args()

    images = bytearray()
    labels = bytearray()
    for digit in range(10):
        flat = json.loads((args.digits_dir / f"{digit}.json").read_text())["data"]
        assert len(flat) % (SIDE * SIDE) == 0, f"{digit}.json: ragged pixel array"
        images.extend(min(255, max(0, round(v * 255))) for v in flat)
        labels.extend([digit] * (len(flat) // (SIDE * SIDE)))

    n = len(labels)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(args.out_dir / "images.idx.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, SIDE, SIDE))
        f.write(images)
    with gzip.GzipFile(args.out_dir / "labels.idx.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels)
    print(f"wrote {n} digits to {args.out_dir}")


if __name__ == "__main__":
    main()
