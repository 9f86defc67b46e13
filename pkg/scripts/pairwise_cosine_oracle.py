"""Minimum of sum_{i<j} cos(v_i, v_j) over nonnegative vectors, with and without annealed noise.

Counts how many of 20 random starts reach dim * binom(n/dim, 2).

    python scripts/pairwise_cosine_oracle.py --seeds 0 1 2 3
"""
import argparse

import numpy as np

from ctr.analysis import axis_parallel_optimum, min_pairwise_cosine

CASES = ((4, 2), (6, 3), (9, 3))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--starts", type=int, default=20)
    args = ap.parse_args()
    for seed in args.seeds:
        for noise in (0.0, 1.0):
            out = []
            for n, d in CASES:
                rng = np.random.default_rng(seed)
                target = axis_parallel_optimum(n, d)
                vals = [min_pairwise_cosine(n, d, rng, noise=noise)[0] for _ in range(args.starts)]
                out.append(f"({n},{d}) {sum(abs(v - target) <= 1e-3 for v in vals)}/{args.starts}")
            print(f"seed={seed} noise={noise}: " + "  ".join(out), flush=True)


if __name__ == "__main__":
    main()
