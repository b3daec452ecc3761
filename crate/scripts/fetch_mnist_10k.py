#!/usr/bin/env python3
"""Fetch 10,000 MNIST digits from the `mnist` npm package and write them as
gzipped IDX files (the standard MNIST container).

The npm package stores each digit as 784 floats equal to round(pixel/255, 3),
so round(v * 255) recovers the original byte exactly.

Usage: scripts/fetch_mnist_10k.py [OUT_DIR]   (default: data/mnist-10k)
"""
import gzip
import io
import json
import os
import struct
import sys
import tarfile
import urllib.request

URL = "https://registry.npmjs.org/mnist/-/mnist-1.1.0.tgz"


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "data/mnist-10k"
    os.makedirs(out, exist_ok=True)
    blob = urllib.request.urlopen(URL, timeout=120).read()
    images = bytearray()
    labels = bytearray()
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
        for digit in range(10):
            member = tar.extractfile(f"package/src/digits/{digit}.json")
            data = json.load(member)["data"]
            assert len(data) % 784 == 0
            for v in data:
                images.append(int(round(v * 255)))
            labels.extend([digit] * (len(data) // 784))
    n = len(labels)
    img_header = struct.pack(">IIII", 0x00000803, n, 28, 28)
    lbl_header = struct.pack(">II", 0x00000801, n)
    # mtime=0 keeps the archives byte-reproducible
    with gzip.GzipFile(os.path.join(out, "images-idx3-ubyte.gz"), "wb", mtime=0) as f:
        f.write(img_header + bytes(images))
    with gzip.GzipFile(os.path.join(out, "labels-idx1-ubyte.gz"), "wb", mtime=0) as f:
        f.write(lbl_header + bytes(labels))
    print(f"wrote {n} samples to {out}")


if __name__ == "__main__":
    main()
