#!/usr/bin/env python3
"""Download the four MNIST IDX files into a data directory.

Usage: python scripts/fetch_mnist.py [DEST]

DEST defaults to $CRM_DATA_DIR, falling back to ./data. Files are stored
gzipped (the loader transparently decompresses) and verified by magic
number and item count.
"""

import gzip
import os
import struct
import sys
import urllib.request
from pathlib import Path

MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)
FILES = {
    "train-images-idx3-ubyte.gz": (0x00000803, 60_000),
    "train-labels-idx1-ubyte.gz": (0x00000801, 60_000),
    "t10k-images-idx3-ubyte.gz": (0x00000803, 10_000),
    "t10k-labels-idx1-ubyte.gz": (0x00000801, 10_000),
}


def verify(path: Path, magic: int, count: int) -> None:
    with gzip.open(path, "rb") as fh:
        got_magic, got_count = struct.unpack(">II", fh.read(8))
    if got_magic != magic or got_count != count:
        raise SystemExit(f"{path}: unexpected header "
                         f"(magic 0x{got_magic:08x}, count {got_count})")


def main() -> int:
    dest = Path(sys.argv[1] if len(sys.argv) > 1
                else os.environ.get("CRM_DATA_DIR") or "data")
    dest.mkdir(parents=True, exist_ok=True)
    for name, (magic, count) in FILES.items():
        target = dest / name
        if target.exists():
            verify(target, magic, count)
            print(f"{target} already present")
            continue
        last_err = None
        for mirror in MIRRORS:
            url = mirror + name
            try:
                print(f"fetching {url}")
                urllib.request.urlretrieve(url, target)
                break
            except OSError as exc:
                last_err = exc
        else:
            raise SystemExit(f"could not fetch {name}: {last_err}")
        verify(target, magic, count)
    print(f"MNIST ready in {dest}; set CRM_DATA_DIR={dest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
