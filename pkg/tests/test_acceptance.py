"""Acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line; the lines are printed in the
pytest terminal summary (and directly when this file is run as a script).
The desk experiments (5-7) train small MLPs on a 2000/1000 MNIST subset.
"""
import functools
import json
import math
import time

import numpy as np
import pytest

from ctr import losses as L
from ctr.analysis import accuracy, axis_parallel_optimum, ct_census, min_pairwise_cosine
from ctr.attacks import AttackSpec, evaluate_robustness
from ctr.cli import main as cli_main
from ctr.model import build_model
from ctr.tensor import Tensor, softmax
from ctr.training import Trainer, TrainSpec, madry_objective, make_rngs, trades_objective, warmup_factors

RESULTS = []
SEEDS = (0, 1, 2)

# desk protocol shared by criteria 5-7
NATURAL = dict(epochs=10, batch_size=128, lr=0.1, scheduler="Cyclic", K=4, rho=1.0, eta=100.0)
MADRY = dict(method="MadryAT", epochs=10, batch_size=128, lr=0.1, scheduler="Cyclic", epsilon=0.05,
             inner_steps=7)
NAT_EPS = 2 / 255
SCE_ATTACK_GAMMA = 5.0


def record(criterion: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    RESULTS.append(line)
    print(line)


def majority(flags) -> bool:
    return sum(flags) > len(flags) / 2


# -- shared desk models ---------------------------------------------------------

@functools.lru_cache(maxsize=None)
def mnist():
    mlxtend = pytest.importorskip("mlxtend")
    del mlxtend
    from ctr.data_io import mnist_subset

    return mnist_subset(None, 2000, 1000, seed=0)


@functools.lru_cache(maxsize=None)
def desk_model(method: str, seed: int, gamma: float = 0.0):
    train, _ = mnist()
    rngs = make_rngs(seed)
    model = build_model("mlp", 784, 10, 0.5, rng=rngs["init"])
    base = MADRY if method == "MadryAT" else dict(NATURAL, method=method)
    Trainer(TrainSpec(seed=seed, gamma=gamma, **base), model, rngs).fit(train)
    return model


def asr(model, kind, loss, eps, gamma=0.0, seed=0):
    spec = AttackSpec(kind=kind, epsilon=eps, loss_kind=loss, gamma=gamma, steps=20)
    return evaluate_robustness(model, mnist()[1], spec, np.random.default_rng(seed))


# -- 1. gradient structure ---------------------------------------------------------

def _relative_ok(analytic, numeric, rtol=1e-4, floor=1e-9):
    return bool(np.all(np.abs(analytic - numeric) <= rtol * np.abs(numeric) + floor))


def _grad(fn, p):
    t = Tensor(p[None].copy(), requires_grad=True)
    fn(t).sum().backward()
    return t.grad[0]


def _fd(fn, p, h=1e-6):
    g = np.zeros_like(p)
    for i in range(len(p)):
        up, down = p.copy(), p.copy()
        up[i] += h
        down[i] -= h
        g[i] = (fn(Tensor(up[None])).item() - fn(Tensor(down[None])).item()) / (2 * h)
    return g


def test_criterion_1_gradient_structure():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    C, failures = 10, []
    for n in range(50):
        z = 2.0 * rng.standard_normal(C)
        p = np.exp(z - z.max())
        p /= p.sum()
        y = [int(rng.integers(C))]
        wrong = np.arange(C) != y[0]
        losses = {
            "CE": lambda t: L.cross_entropy(t, y),
            "STD": lambda t: L.std_loss(t, y),
            "SCE": lambda t: L.sce_loss(t, y, 3.0),
        }
        g = {k: _grad(f, p) for k, f in losses.items()}
        u = p[wrong].mean()
        checks = {
            "dCE/dp_wrong = 0": np.all(g["CE"][wrong] == 0.0),
            "dSTD/dp_label = 0": g["STD"][y[0]] == 0.0,
            "sign dSTD/dp_c": np.array_equal(np.sign(g["STD"][wrong]), np.sign(p[wrong] - u)),
            "dSCE/dp_label < 0": g["SCE"][y[0]] < 0,
        }
        for k, f in losses.items():
            checks[f"FD {k}"] = _relative_ok(g[k], _fd(f, p))
        failures += [f"#{n} {name}" for name, ok in checks.items() if not ok]
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 5.0
    record("C1 gradient structure", ok, f"50 ProbVectors (C=10), {len(failures)} failed checks, {elapsed:.2f}s")
    assert not failures, failures[:5]
    assert elapsed < 5.0


# -- 2. CT bound ------------------------------------------------------------------

def test_criterion_2_ct_bound():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = -np.inf
    for _ in range(100):
        C = int(rng.integers(3, 21))
        z = 3.0 * rng.standard_normal((1, C))
        p = np.exp(z - z.max())
        p /= p.sum()
        y = [int(rng.integers(C))]
        flat = L.flatten_wrong(p, y)
        margin = (flat[0][np.arange(C) != y[0]].max()) - 1.0 / (C - 1)
        worst = max(worst, margin)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 1.0
    record("C2 CT bound", ok, f"max(wrong - 1/(C-1)) = {worst:.3e} over 100 vectors, {elapsed:.3f}s")
    assert worst <= 1e-9 and elapsed < 1.0


# -- 3. pairwise-cosine minimum -----------------------------------------------------

def test_criterion_3_pairwise_cosine_minimum():
    t0 = time.perf_counter()
    hits = {}
    for N, D in ((4, 2), (6, 3), (9, 3)):
        target = axis_parallel_optimum(N, D)
        rng = np.random.default_rng(0)
        values = [min_pairwise_cosine(N, D, rng)[0] for _ in range(20)]
        hits[(N, D)] = sum(abs(v - target) <= 1e-3 for v in values)
    elapsed = time.perf_counter() - t0
    ok = all(h >= 18 for h in hits.values()) and elapsed < 30.0
    detail = ", ".join(f"(N={N},C-1={D}) {h}/20" for (N, D), h in hits.items())
    record("C3 pairwise-cosine optimum", ok, f"{detail}, {elapsed:.1f}s")
    assert ok


# -- 4. degeneracy equalities ---------------------------------------------------------

def test_criterion_4_degeneracy():
    rng = np.random.default_rng(3)
    B, C = 16, 10
    z = rng.standard_normal((B, C))
    p = Tensor(np.exp(z) / np.exp(z).sum(axis=1, keepdims=True))
    q = Tensor(np.roll(p.data, 1, axis=0))
    y = rng.integers(0, C, B)
    subnets = [Tensor(np.roll(p.data, k, axis=1)) for k in range(4)]
    model = build_model("mlp", 12, C, rng=np.random.default_rng(0))
    x, x_adv = rng.uniform(size=(B, 12)), rng.uniform(size=(B, 12))
    p_nat, p_adv = softmax(model.forward(Tensor(x))), softmax(model.forward(Tensor(x_adv)))
    checks = {
        "SCE(0)=CE": np.array_equal(L.sce_loss(p, y, 0.0).data, L.cross_entropy(p, y).data),
        "SKL(0)=KL": np.array_equal(L.skl_loss(p, q, y, 0.0).data, L.kl_divergence(p, q).data),
        "MDL(rho=0)=MSD": np.array_equal(L.mdl_loss(subnets, y, np.ones(B), rho=0.0).data,
                                         L.multisample_ce(subnets, y).data),
        "Madry(0)": madry_objective(model, x_adv, y, 0.0).item() == L.cross_entropy(p_adv, y).mean().item(),
        "TRADES(0)": trades_objective(model, x, x_adv, y, 0.0, 6.0).item()
        == (L.cross_entropy(p_nat, y) + L.kl_divergence(p_adv, p_nat) * 6.0).mean().item(),
    }
    bad = [k for k, v in checks.items() if not v]
    record("C4 degeneracy equalities", not bad, f"{len(checks) - len(bad)}/{len(checks)} exact")
    assert not bad, bad


# -- 5. MDL direction -------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_mdl_direction():
    t0 = time.perf_counter()
    _, test = mnist()
    fgsm = AttackSpec(kind="FGSM", epsilon=0.1)
    flags, parts = [], []
    for seed in SEEDS:
        mdl, base = desk_model("NaturalMDL", seed), desk_model("NaturalCE", seed)
        acc = 100 * (accuracy(mdl, test) - accuracy(base, test))
        rob = 100 * (evaluate_robustness(mdl, test, fgsm)["robust_accuracy"]
                     - evaluate_robustness(base, test, fgsm)["robust_accuracy"])
        ct_m, ct_b = ct_census(mdl, test, 1 / 9).count, ct_census(base, test, 1 / 9).count
        ok = acc >= -0.5 and rob >= 3.0 and ct_m >= ct_b
        flags.append(ok)
        parts.append(f"seed {seed}: acc {acc:+.1f} FGSM {rob:+.1f} CT {ct_m}>={ct_b} {'ok' if ok else 'x'}")
    elapsed = time.perf_counter() - t0
    ok = majority(flags)
    record("C5 MDL vs dropout", ok, f"{sum(flags)}/3 seeds ({'; '.join(parts)}), {elapsed:.0f}s")
    assert ok


# -- 6. attack ordering ---------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_attack_ordering():
    t0 = time.perf_counter()
    flags, parts, info = [], [], []
    for seed in SEEDS:
        nat = desk_model("NaturalCE", seed)
        r = {(k, l): asr(nat, k, l, NAT_EPS)["asr"] for k in ("FGSM", "PGD") for l in ("CE", "STD")}
        madry = desk_model("MadryAT", seed, 3.0)
        sce = asr(madry, "PGD", "SCE", MADRY["epsilon"], SCE_ATTACK_GAMMA)["asr"]
        ce = asr(madry, "PGD", "CE", MADRY["epsilon"])["asr"]
        ok = r["PGD", "STD"] >= r["PGD", "CE"] and r["FGSM", "STD"] >= r["FGSM", "CE"] and sce >= ce
        flags.append(ok)
        parts.append(f"seed {seed}: S-PGD {r['PGD', 'STD']:.3f}/{r['PGD', 'CE']:.3f} "
                     f"S-FGSM {r['FGSM', 'STD']:.3f}/{r['FGSM', 'CE']:.3f} SCE-PGD {sce:.3f}/{ce:.3f}")
        wide = {(k, l): asr(nat, k, l, 0.1)["asr"] for k in ("FGSM", "PGD") for l in ("CE", "STD")}
        info.append(f"seed {seed}: S-PGD {wide['PGD', 'STD']:.3f}/{wide['PGD', 'CE']:.3f} "
                    f"S-FGSM {wide['FGSM', 'STD']:.3f}/{wide['FGSM', 'CE']:.3f}")
    elapsed = time.perf_counter() - t0
    ok = majority(flags)
    record("C6 attack ordering", ok, f"{sum(flags)}/3 seeds, natural eps=2/255, Madry eps=0.05 "
                                     f"({'; '.join(parts)}), {elapsed:.0f}s")
    RESULTS.append(f"[INFO] C6 natural model at eps=0.1 (not part of the criterion): {'; '.join(info)}")
    assert ok


# -- 7. CTR inside Madry AT ------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_ctr_in_madry():
    t0 = time.perf_counter()
    _, test = mnist()
    flags, parts = [], []
    for seed in SEEDS:
        with_ctr, without = desk_model("MadryAT", seed, 3.0), desk_model("MadryAT", seed, 0.0)
        rob = [asr(m, "PGD", "CE", MADRY["epsilon"], seed=seed)["robust_accuracy"] for m in (with_ctr, without)]
        nat = [accuracy(m, test) for m in (with_ctr, without)]
        d_rob, d_nat = 100 * (rob[0] - rob[1]), 100 * (nat[0] - nat[1])
        ok = d_rob >= 0 and abs(d_nat) <= 3.0
        flags.append(ok)
        parts.append(f"seed {seed}: PGD {d_rob:+.1f} nat {d_nat:+.1f}")
    elapsed = time.perf_counter() - t0
    ok = all(flags)
    record("C7 Madry-AT gamma=3 vs 0", ok, f"{sum(flags)}/3 seeds ({'; '.join(parts)}), {elapsed:.0f}s")
    assert ok and elapsed < 20 * 60


# -- 8. warmup recurrence ---------------------------------------------------------------------

def test_criterion_8_warmup():
    I = 5
    direct = [0.001]
    for i in range(1, I + 1):
        direct.append(direct[-1] * (1 - i / I) + i / I)
    kappa = warmup_factors(I)
    err = max(abs(a - b) for a, b in zip(kappa, direct))
    ok = len(kappa) == I + 1 and err <= 1e-12 and kappa[I] == 1.0
    record("C8 warmup recurrence", ok, f"max |diff| {err:.1e}, kappa_(I+1) = {kappa[I]!r}")
    assert ok


# -- 9. CLI determinism -----------------------------------------------------------------------------

def test_criterion_9_determinism(tmp_path, capsys):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "schema_version": 1, "seed": 3,
        "data": {"kind": "blobs", "classes": 4, "dim": 8, "n_per_class": 50, "test_n_per_class": 20},
        "model": {"hidden": [32, 16]},
        "train": {"method": "MadryAT", "gamma": 1.0, "epochs": 3, "batch_size": 32, "lr": 0.05,
                  "scheduler": "Cyclic", "epsilon": 0.05},
        "attack": {"kind": "PGD", "epsilon": 0.05, "steps": 5},
    }))
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        codes = [
            cli_main(["train", "--config", str(config), "--out", str(out / "train")]),
            cli_main(["attack", "--grid", "--config", str(config), "--checkpoint", str(out / "train" / "model.npz"),
                      "--out", str(out / "attack")]),
        ]
        assert codes == [0, 0]
        files = [out / "train" / "history.jsonl"] + sorted((out / "attack").glob("*.csv"))
        runs.append({f.name: f.read_bytes() for f in files})
    capsys.readouterr()
    same = runs[0] == runs[1] and len(runs[0]) == 1 + 15 + 1
    record("C9 byte-identical reruns", same, f"{len(runs[0])} files compared (history + 15 attack CSVs + summary)")
    assert same


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
