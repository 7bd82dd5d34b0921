"""Write the MNIST subset bundled with mlxtend (500 digits per class) as IDX files.

Usage: python3 scripts/make_mnist_subset.py [--out data/mnist]

Skip this when the full MNIST IDX files are already in the output directory.
"""
import argparse
from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data

from dirnet.data_io import write_idx_images, write_idx_labels


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="data/mnist")
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    x, y = mnist_data()
    write_idx_images(out / "train-images-idx3-ubyte", x.reshape(-1, 28, 28).astype(np.uint8))
    write_idx_labels(out / "train-labels-idx1-ubyte", y.astype(np.uint8))
    print(f"wrote {len(y)} digits to {out}")


if __name__ == "__main__":
    main()
