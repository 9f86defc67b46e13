"""Natural training on the MNIST desk subset: dropout (NaturalCE) vs MSD vs MDL.

Prints accuracy, FGSM/PGD robust accuracy, the CT census at 1/(C-1), and
writes per-method robustness curves and CT sweeps to --out.

    python scripts/mdl_vs_dropout.py --seeds 0 1 2 --out runs/mdl
    python scripts/mdl_vs_dropout.py --lr 0.01 --scheduler Multistep   # the low-lr setting
"""
import argparse
from pathlib import Path

import numpy as np

from ctr.analysis import accuracy, ct_census, ct_sweep, export, robustness_curve, theoretical_ct
from ctr.attacks import AttackSpec, evaluate_robustness
from ctr.data_io import mnist_subset
from ctr.model import build_model
from ctr.training import Trainer, TrainSpec, make_rngs

METHODS = ("NaturalCE", "NaturalMSD", "NaturalMDL")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--lr", type=float, default=0.1)
    ap.add_argument("--scheduler", default="Cyclic")
    ap.add_argument("--eps", type=float, default=0.1)
    ap.add_argument("--out", type=Path, default=Path("runs/mdl_vs_dropout"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    train, test = mnist_subset(None, 2000, 1000, seed=0)
    ct = theoretical_ct(10)
    rows = []
    for seed in args.seeds:
        for method in METHODS:
            rngs = make_rngs(seed)
            model = build_model("mlp", 784, 10, 0.5, rng=rngs["init"])
            spec = TrainSpec(method=method, epochs=args.epochs, lr=args.lr, scheduler=args.scheduler, seed=seed)
            Trainer(spec, model, rngs).fit(train)
            row = {"seed": seed, "method": method, "accuracy": accuracy(model, test),
                   "ct_count": ct_census(model, test, ct).count}
            for kind in ("FGSM", "PGD"):
                spec_a = AttackSpec(kind=kind, epsilon=args.eps, steps=40)
                row[f"{kind.lower()}_robust"] = evaluate_robustness(model, test, spec_a)["robust_accuracy"]
            rows.append(row)
            print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
                  flush=True)
            curve = robustness_curve(model, test, AttackSpec(kind="FGSM"), [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3])
            export(curve, args.out / f"curve_{method}_{seed}.csv", "csv")
            export(ct_sweep(model, test, ct * np.arange(1, 101) / 100), args.out / f"ct_sweep_{method}_{seed}.csv",
                   "csv")
    export(rows, args.out / "summary.csv", "csv")


if __name__ == "__main__":
    main()
