#!/usr/bin/env python3
"""Write the 5000-sample MNIST subset bundled with mlxtend as gzipped IDX files.

Usage: pip download --no-deps mlxtend -d /tmp/w && python3 make_mnist5k.py /tmp/w/mlxtend-*.whl data/mnist5k
"""
import gzip
import struct
import sys
import zipfile


def main(wheel, out_dir):
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = [r.split(",") for r in gzip.decompress(raw).decode().strip().split("\n")]
    images = bytes(int(v) for r in rows for v in r[:-1])
    labels = bytes(int(r[-1]) for r in rows)
    n = len(rows)
    with gzip.GzipFile(f"{out_dir}/images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28) + images)
    with gzip.GzipFile(f"{out_dir}/labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n) + labels)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
