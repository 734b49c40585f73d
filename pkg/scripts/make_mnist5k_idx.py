"""Convert the 5000-digit MNIST sample shipped with mlxtend into IDX files.

    pip install mlxtend
    python scripts/make_mnist5k_idx.py data/
"""

import argparse
import os

import numpy as np

from amibreak.data import write_idx


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("outdir")
    args = parser.parse_args()

    from mlxtend.data.mnist import DATA_PATH

    table = np.loadtxt(DATA_PATH, delimiter=",", dtype=np.int64)
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    os.makedirs(args.outdir, exist_ok=True)
    write_idx(images, labels,
              os.path.join(args.outdir, "mnist5k-images-idx3-ubyte.gz"),
              os.path.join(args.outdir, "mnist5k-labels-idx1-ubyte.gz"))
    print(f"wrote {len(labels)} digits to {args.outdir}")


if __name__ == "__main__":
    main()
