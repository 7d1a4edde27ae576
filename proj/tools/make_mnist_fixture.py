#!/usr/bin/env python3
"""Write an MNIST subset in IDX format from the 5000-digit sample bundled with mlxtend.

Usage: make_mnist_fixture.py OUT_DIR [COUNT] [WHEEL_DIR]

The bundled sample is a slice of the public MNIST digits, 500 per class and
sorted by label, stored as CSV (784 pixels then label per row). This script
takes COUNT/10 rows of every class, shuffles them with a fixed seed and
re-encodes them as big-endian IDX files so the C++ parser reads them like the
original distribution.
"""
import gzip
import random
import pathlib
import struct
import sys
import zipfile


def load_rows():
    try:
        import mlxtend.data.mnist as m
        raw = pathlib.Path(m.DATA_PATH).read_bytes()
    except ImportError:
        wheels = sorted(pathlib.Path(sys.argv[3] if len(sys.argv) > 3 else ".").glob("mlxtend-*.whl"))
        if not wheels:
            sys.exit("mlxtend not installed and no wheel found")
        raw = zipfile.ZipFile(wheels[-1]).read("mlxtend/data/data/mnist_5k.csv.gz")
    for line in gzip.decompress(raw).decode().splitlines():
        vals = [int(float(v)) for v in line.split(",")]
        yield vals[:784], vals[784]


def main():
    out = pathlib.Path(sys.argv[1])
    count = int(sys.argv[2]) if len(sys.argv) > 2 else 3000
    per_class = count // 10
    by_label = {}
    for px, lbl in load_rows():
        by_label.setdefault(lbl, []).append((px, lbl))
    rows = [r for lbl in sorted(by_label) for r in by_label[lbl][:per_class]]
    random.Random(20240601).shuffle(rows)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(rows), 28, 28))
        for px, _ in rows:
            f.write(bytes(px))
    with open(out / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 2049, len(rows)))
        f.write(bytes(lbl for _, lbl in rows))


if __name__ == "__main__":
    main()
