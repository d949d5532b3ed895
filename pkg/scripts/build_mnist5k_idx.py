"""Convert the 5000-digit MNIST sample shipped with mlxtend into IDX files.

The sample holds 500 genuine MNIST training digits per class.  The first 250
of every class become ``train-*`` files and the remaining 250 ``test-*``
files, so train and test never share a digit.

    python scripts/build_mnist5k_idx.py SOURCE [OUT_DIR]

SOURCE is an mlxtend wheel, an installed ``mnist_5k.csv.gz`` or the csv
itself (784 pixel columns followed by the label).
"""

import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from nsfx.data import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_source(path):
    path = Path(path)
    if path.suffix == ".whl":
        raw = zipfile.ZipFile(path).read(MEMBER)
    else:
        raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    return table[:, :-1].astype(np.uint8).reshape(-1, 28, 28), table[:, -1].astype(np.uint8)


def main(argv):
    if not argv:
        print(__doc__)
        return 2
    out = Path(argv[1] if len(argv) > 1 else "data/mnist5k")
    out.mkdir(parents=True, exist_ok=True)
    images, labels = read_source(argv[0])
    rank = np.zeros(len(labels), dtype=int)
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        rank[members] = np.arange(len(members))
    half = np.bincount(labels).min() // 2
    for name, mask in (("train", rank < half), ("test", rank >= half)):
        write_idx(out / f"{name}-images-idx3-ubyte.gz", images[mask])
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", labels[mask])
        print(f"{name}: {int(mask.sum())} digits")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
