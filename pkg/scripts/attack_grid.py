"""ASR of {FGSM, PGD, APGD} x {CE, SCE, KL, SKL, STD} on natural and Madry-AT desk models.

    python scripts/attack_grid.py --seed 0 --out runs/grid
"""
import argparse
from pathlib import Path

import numpy as np

from ctr.analysis import export
from ctr.attacks import AttackSpec, evaluate_robustness
from ctr.cli import GRID_ATTACKS, GRID_GAMMA, GRID_LOSSES
from ctr.data_io import mnist_subset
from ctr.model import build_model
from ctr.training import Trainer, TrainSpec, make_rngs


def train_model(train, seed, **spec):
    rngs = make_rngs(seed)
    model = build_model("mlp", 784, 10, 0.5, rng=rngs["init"])
    Trainer(TrainSpec(seed=seed, epochs=10, lr=0.1, scheduler="Cyclic", **spec), model, rngs).fit(train)
    return model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--nat-eps", type=float, default=2 / 255)
    ap.add_argument("--at-eps", type=float, default=0.05)
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--out", type=Path, default=Path("runs/attack_grid"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    train, test = mnist_subset(None, 2000, 1000, seed=0)
    models = {
        "NT": (train_model(train, args.seed, method="NaturalCE"), args.nat_eps),
        "MadryAT": (train_model(train, args.seed, method="MadryAT", gamma=3.0, epsilon=args.at_eps), args.at_eps),
    }
    rows = []
    for name, (model, eps) in models.items():
        for kind in GRID_ATTACKS:
            for loss in GRID_LOSSES:
                spec = AttackSpec(kind=kind, loss_kind=loss, epsilon=eps, steps=args.steps,
                                  gamma=GRID_GAMMA.get(loss, 0.0))
                m = evaluate_robustness(model, test, spec, np.random.default_rng(args.seed))
                rows.append(dict(m, model=name))
                print(f"{name:8s} {kind:5s} {loss:4s} eps={eps:.4f} asr={m['asr']:.4f}", flush=True)
    export(rows, args.out / f"grid_seed{args.seed}.csv", "csv")


if __name__ == "__main__":
    main()
