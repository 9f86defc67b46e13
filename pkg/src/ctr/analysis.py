"""Accuracy, confidence-threshold census, robustness curves and result export."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attacks import AttackSpec, evaluate_robustness, with_overrides


@dataclass
class CtCensus:
    threshold: float
    total: int
    count: int

    @property
    def fraction(self) -> float:
        return self.count / self.total if self.total else 0.0


@dataclass
class Curve:
    x: list
    y: list
    x_label: str = "x"
    y_label: str = "y"
    label: str = ""

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("curve x and y lengths differ")
        if any(b <= a for a, b in zip(self.x, self.x[1:])):
            raise ValueError("curve x values must be strictly increasing")

    def rows(self) -> list:
        return [{self.x_label: a, self.y_label: b} for a, b in zip(self.x, self.y)]


def accuracy(model, dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty dataset")
    return float((model.predict(dataset.inputs) == dataset.labels).mean())


def wrong_probs(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """[N, C-1] probabilities of the wrong categories."""
    keep = np.ones(probs.shape, dtype=bool)
    keep[np.arange(len(labels)), labels] = False
    return probs[keep].reshape(len(labels), probs.shape[1] - 1)


def census_from_probs(probs: np.ndarray, labels: np.ndarray, threshold: float) -> CtCensus:
    w = wrong_probs(probs, np.asarray(labels))
    return CtCensus(float(threshold), int(w.size), int((w < threshold).sum()))


def ct_census(model, dataset, threshold: float) -> CtCensus:
    """Count wrong-category probabilities strictly below ``threshold`` over the dataset."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    return census_from_probs(model.predict_proba(dataset.inputs), dataset.labels, threshold)


def ct_sweep(model, dataset, thresholds) -> Curve:
    thresholds = [float(t) for t in thresholds]
    if any(not 0.0 < t <= 1.0 for t in thresholds):
        raise ValueError("thresholds must lie in (0, 1]")
    probs = model.predict_proba(dataset.inputs)
    w = np.sort(wrong_probs(probs, dataset.labels).ravel())
    # strict "<" count is the insertion index on the left
    counts = [int(np.searchsorted(w, t, side="left")) for t in thresholds]
    return Curve(thresholds, counts, "threshold", "count")


def theoretical_ct(num_classes: int) -> float:
    return 1.0 / (num_classes - 1)


def axis_parallel_optimum(n_vectors: int, dim: int) -> float:
    """dim * binom(n_vectors / dim, 2): the pairwise-cosine sum when the vectors
    split evenly over the coordinate axes (requires dim | n_vectors)."""
    if n_vectors % dim:
        raise ValueError("the even axis split needs dim | n_vectors")
    return float(dim * math.comb(n_vectors // dim, 2))


def pairwise_cosine_sum(V: np.ndarray) -> float:
    U = V / np.linalg.norm(V, axis=1, keepdims=True)
    S = U @ U.T
    return float((S.sum() - np.trace(S)) / 2)


def min_pairwise_cosine(n_vectors: int, dim: int, rng, steps: int = 3000, lr: float = 0.1,
                        noise: float = 1.0, anneal: float = 0.6) -> tuple:
    """Minimise sum_{i<j} cos(v_i, v_j) over nonnegative unit vectors.

    Projected gradient descent on the sphere-orthant intersection. Configurations
    such as three vectors on one axis and one on the other are strict local
    minima, so Gaussian noise of scale ``noise * sqrt(lr)`` is injected and
    annealed linearly to zero over the first ``anneal`` fraction of the steps;
    ``noise=0`` gives plain projected gradient descent.
    Returns ``(value, vectors)``.
    """
    V = rng.uniform(0.0, 1.0, size=(n_vectors, dim))
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    eye = np.eye(dim)
    n_anneal = int(anneal * steps)
    for t in range(steps):
        G = V.sum(axis=0, keepdims=True) - V
        G -= (G * V).sum(axis=1, keepdims=True) * V
        sigma = noise * max(0.0, 1.0 - t / n_anneal) if n_anneal else 0.0
        step = -lr * G
        if sigma > 0:
            step += sigma * math.sqrt(lr) * rng.standard_normal(V.shape)
        V = np.maximum(V + step, 0.0)
        norms = np.linalg.norm(V, axis=1)
        dead = norms < 1e-12
        if dead.any():
            V[dead] = eye[rng.integers(0, dim, int(dead.sum()))]
            norms[dead] = 1.0
        V /= norms[:, None]
    return pairwise_cosine_sum(V), V


def robustness_curve(model, dataset, spec: AttackSpec, eps_list, rng_seed: int = 0) -> Curve:
    """Robust accuracy for each epsilon; the epsilon = 0 point is natural accuracy."""
    eps_list = [float(e) for e in eps_list]
    accs = []
    for eps in eps_list:
        if eps == 0.0:
            accs.append(accuracy(model, dataset))
            continue
        s = with_overrides(spec, epsilon=eps)
        metrics = evaluate_robustness(model, dataset, s, rng=np.random.default_rng(rng_seed))
        accs.append(metrics["robust_accuracy"])
    return Curve(eps_list, accs, "epsilon", "robust_accuracy", label=f"{spec.kind}-{spec.loss_kind}")


def is_nonincreasing(values, slack: float = 0.0) -> bool:
    return all(b <= a + slack for a, b in zip(values, values[1:]))


# -- export ---------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, bool) or value is None:
        return json.dumps(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if not math.isfinite(v):
            raise ValueError("cannot export non-finite floats")
        return f"{v:.6f}"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, dict):
        items = sorted(value.items())
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in items) + "}"
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot export {type(value).__name__}")


def dumps_fixed(doc) -> str:
    """JSON with sorted keys and every float written as %.6f."""
    return _fmt(doc) + "\n"


def _csv_cell(value) -> str:
    if isinstance(value, (float, np.floating)) and not isinstance(value, bool):
        return f"{float(value):.6f}"
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return "" if value is None else str(value)


def export(results, path, fmt: str = "json") -> None:
    """Write a list of flat records (or a Curve) to JSON or CSV, byte-stably.

    JSON: ``{"rows": [...]}``. CSV: header of the sorted union of keys.
    """
    if isinstance(results, Curve):
        results = results.rows()
    rows = list(results)
    path = Path(path)
    if fmt == "json":
        text = dumps_fixed({"rows": rows})
    elif fmt == "csv" and not rows:
        text = ""
    elif fmt == "csv":
        keys = sorted({k for r in rows for k in r})
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(keys)
        for r in rows:
            writer.writerow([_csv_cell(r.get(k)) for k in keys])
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    with open(path, "w", newline="") as fh:
        fh.write(text)


def read_export(path, fmt: str = "json") -> list:
    path = Path(path)
    if fmt == "json":
        return json.loads(path.read_text())["rows"]
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))

    def parse(v):
        if v == "":
            return None
        for cast in (int, float):
            try:
                return cast(v)
            except ValueError:
                pass
        return v

    return [{k: parse(v) for k, v in r.items()} for r in rows]


def export_logits(model, dataset, path) -> None:
    """Per-example logits as CSV (index, label, logit_0..logit_{C-1}) for external t-SNE."""
    logits = model.logits(dataset.inputs)
    rows = []
    for i, (z, y) in enumerate(zip(logits, dataset.labels)):
        row = {"index": i, "label": int(y)}
        row.update({f"logit_{c:03d}": float(v) for c, v in enumerate(z)})
        rows.append(row)
    export(rows, path, "csv")
