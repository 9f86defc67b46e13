"""Madry-AT with and without confidence threshold reduction on the MNIST desk subset.

    python scripts/madry_ctr.py --gammas 0 1 3 5 --seeds 0 1 2
"""
import argparse
from pathlib import Path

import numpy as np

from ctr.analysis import accuracy, export
from ctr.attacks import AttackSpec, evaluate_robustness
from ctr.data_io import mnist_subset
from ctr.model import build_model
from ctr.training import Trainer, TrainSpec, make_rngs


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--gammas", type=float, nargs="+", default=[0.0, 3.0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--method", default="MadryAT", choices=["MadryAT", "FastAT", "FreeAT", "TRADES"])
    ap.add_argument("--eps", type=float, default=0.05)
    ap.add_argument("--lr", type=float, default=0.1)
    ap.add_argument("--scheduler", default="Cyclic")
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--warmup", action="store_true")
    ap.add_argument("--out", type=Path, default=Path("runs/madry_ctr"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    train, test = mnist_subset(None, 2000, 1000, seed=0)
    rows = []
    for seed in args.seeds:
        for gamma in args.gammas:
            rngs = make_rngs(seed)
            model = build_model("mlp", 784, 10, 0.5, rng=rngs["init"])
            spec = TrainSpec(method=args.method, gamma=gamma, epsilon=args.eps, lr=args.lr, epochs=args.epochs,
                             scheduler=args.scheduler, warmup=args.warmup, seed=seed)
            Trainer(spec, model, rngs).fit(train)
            row = {"seed": seed, "gamma": gamma, "natural": accuracy(model, test)}
            for kind in ("FGSM", "PGD", "APGD"):
                m = evaluate_robustness(model, test, AttackSpec(kind=kind, epsilon=args.eps, steps=20),
                                        np.random.default_rng(seed))
                row[kind.lower()] = m["robust_accuracy"]
            rows.append(row)
            print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
                  flush=True)
    export(rows, args.out / f"{args.method}.csv", "csv")


if __name__ == "__main__":
    main()
