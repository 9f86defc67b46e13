"""Write the mlxtend MNIST sample as IDX train/t10k pairs for ``data.kind = "idx"`` configs.

    python scripts/write_mnist_idx.py --out data/mnist
"""
import argparse
from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data

from ctr.data_io import write_idx


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("data/mnist"))
    ap.add_argument("--train", type=int, default=2000)
    ap.add_argument("--test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    x, y = mnist_data()
    order = np.random.default_rng(args.seed).permutation(len(y))
    tr, te = order[:args.train], order[args.train:args.train + args.test]
    write_idx(x[tr], y[tr], args.out / "train-images-idx3-ubyte", args.out / "train-labels-idx1-ubyte")
    write_idx(x[te], y[te], args.out / "t10k-images-idx3-ubyte", args.out / "t10k-labels-idx1-ubyte")
    print(f"wrote {len(tr)} train / {len(te)} test examples to {args.out}")


if __name__ == "__main__":
    main()
