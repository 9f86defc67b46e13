"""Per-example losses on probability matrices.

Every loss takes softmax outputs ``probs`` of shape [B, C] (a :class:`Tensor`)
plus integer labels, and returns a length-B tensor. Probabilities are treated
as the independent variables, so the same code serves both training (probs
come from ``softmax(model(x))``) and the gradient-structure checks (probs are
free leaves).

The "wrong-category vector" of an example is its probability row with the
correct entry removed. Removal is done by multiplying with a 0/1 mask, which
leaves dot products, norms and sums over the remaining C-1 entries unchanged.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, clamp_min, ensure_tensor, exp, log, safe_sqrt

PROB_FLOOR = 1e-12
# squared norm below which a wrong-category vector counts as all zeros; a
# smaller cutoff lets 1/(|a||b|)^2 overflow in the backward pass
DEGENERATE_SQ = 1e-24


def _labels(labels) -> np.ndarray:
    return np.asarray(labels, dtype=np.int64).reshape(-1)


def wrong_mask(labels, num_classes: int) -> np.ndarray:
    labels = _labels(labels)
    mask = np.ones((len(labels), num_classes))
    mask[np.arange(len(labels)), labels] = 0.0
    return mask


def check_probs(probs, labels=None, atol: float = 1e-6) -> None:
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    if p.ndim != 2:
        raise ValueError(f"probabilities must be [B, C], got shape {p.shape}")
    if np.any(p < -atol) or np.any(p > 1 + atol):
        raise ValueError("probabilities outside [0, 1]")
    if not np.allclose(p.sum(axis=1), 1.0, atol=atol):
        raise ValueError("probability rows do not sum to 1")
    if labels is not None:
        y = _labels(labels)
        if len(y) != len(p) or np.any(y < 0) or np.any(y >= p.shape[1]):
            raise ValueError("labels out of range")


def correct_prob(probs: Tensor, labels) -> Tensor:
    y = _labels(labels)
    return probs[np.arange(len(y)), y]


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """-ln p[label], with p clamped at 1e-12."""
    probs = ensure_tensor(probs)
    return -log(clamp_min(correct_prob(probs, labels), PROB_FLOOR))


def kl_divergence(p_adv: Tensor, p_nat: Tensor) -> Tensor:
    """KL(p_nat || p_adv) = sum_i q_i log(q_i / p_i), q the clean distribution.

    Argument order follows L_KL(f(x+delta), f(x)).
    """
    p_adv, p_nat = ensure_tensor(p_adv), ensure_tensor(p_nat)
    q = clamp_min(p_nat, PROB_FLOOR)
    p = clamp_min(p_adv, PROB_FLOOR)
    return (p_nat * (log(q) - log(p))).sum(axis=1)


def _degenerate_safe_ratio(num: Tensor, den: Tensor, degenerate: np.ndarray) -> Tensor:
    # den is replaced by 1 on degenerate rows and the ratio zeroed there
    keep = (~degenerate).astype(np.float64)
    return num * keep / (den + degenerate.astype(np.float64))


def cosine_diversity(p1: Tensor, p2: Tensor, labels, return_flags: bool = False):
    """Cosine similarity of the two wrong-category vectors.

    Rows where either wrong vector is all zeros are degenerate: the value is
    0 and the row is flagged.
    """
    p1, p2 = ensure_tensor(p1), ensure_tensor(p2)
    m = wrong_mask(labels, p1.shape[1])
    w1, w2 = p1 * m, p2 * m
    sq1 = (w1 * w1).sum(axis=1)
    sq2 = (w2 * w2).sum(axis=1)
    degenerate = (sq1.data < DEGENERATE_SQ) | (sq2.data < DEGENERATE_SQ)
    out = _degenerate_safe_ratio((w1 * w2).sum(axis=1), safe_sqrt(sq1) * safe_sqrt(sq2), degenerate)
    return (out, degenerate) if return_flags else out


def pcc_diversity(p1: Tensor, p2: Tensor, labels, return_flags: bool = False):
    """(Pearson correlation of the wrong-category vectors + 1) / 2, in [0, 1].

    A zero-variance wrong vector gives correlation 0, i.e. diversity 0.5.
    """
    p1, p2 = ensure_tensor(p1), ensure_tensor(p2)
    C = p1.shape[1]
    if C < 3:
        raise ValueError("PCC diversity needs C >= 3")
    m = wrong_mask(labels, C)
    n = C - 1
    c1 = (p1 - (p1 * m).sum(axis=1, keepdims=True) * (1.0 / n)) * m
    c2 = (p2 - (p2 * m).sum(axis=1, keepdims=True) * (1.0 / n)) * m
    sq1 = (c1 * c1).sum(axis=1)
    sq2 = (c2 * c2).sum(axis=1)
    degenerate = (sq1.data < DEGENERATE_SQ) | (sq2.data < DEGENERATE_SQ)
    pe = _degenerate_safe_ratio((c1 * c2).sum(axis=1), safe_sqrt(sq1) * safe_sqrt(sq2), degenerate)
    out = (pe + 1.0) * 0.5
    return (out, degenerate) if return_flags else out


DIVERSITIES = {"cosine": cosine_diversity, "pcc": pcc_diversity}


def nearest_rank_percentile(values, eta: float) -> float:
    """Smallest value v such that at least eta% of the values are <= v."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    if len(values) == 0:
        raise ValueError("percentile of an empty batch")
    if not 0.0 < eta <= 100.0:
        raise ValueError(f"eta must lie in (0, 100], got {eta}")
    rank = max(1, math.ceil(eta / 100.0 * len(values)))
    return float(values[rank - 1])


def compute_mask(mean_probs, labels, eta: float) -> np.ndarray:
    """0/1 mask keeping the eta% of the batch with the smallest -log p[label].

    ``mean_probs`` are the K-averaged sub-network probabilities (no gradient).
    Ties at the threshold are kept.
    """
    p = mean_probs.data if isinstance(mean_probs, Tensor) else np.asarray(mean_probs, dtype=np.float64)
    y = _labels(labels)
    if len(y) == 0:
        raise ValueError("mask of an empty batch")
    nll = -np.log(np.maximum(p[np.arange(len(y)), y], PROB_FLOOR))
    T = nearest_rank_percentile(nll, eta)
    return (nll <= T).astype(np.float64)


def orthogonal_term(probs_list, labels, diversity: str = "cosine") -> Tensor:
    """Mean pairwise diversity over the K sub-network outputs, in [0, 1] (unmasked)."""
    K = len(probs_list)
    if K < 2:
        raise ValueError("the orthogonal term needs K >= 2 sub-networks")
    div = DIVERSITIES[diversity]
    total = None
    for i in range(K):
        for j in range(i + 1, K):
            d = div(probs_list[i], probs_list[j], labels)
            total = d if total is None else total + d
    return total * (2.0 / (K * (K - 1)))


def mdl_loss(probs_list, labels, mask, rho: float = 1.0, diversity: str = "cosine") -> Tensor:
    """Mask-guided divergence loss per example.

    mean_k CE(P^k) + rho * mask * (sum_{i<j} D(P^i, P^j)) / (K(K-1)/2)
    """
    K = len(probs_list)
    if K < 2:
        raise ValueError(f"MDL needs K >= 2, got {K}")
    ce = None
    for p in probs_list:
        term = cross_entropy(p, labels)
        ce = term if ce is None else ce + term
    ce = ce * (1.0 / K)
    if rho == 0.0:
        return ce
    ortho = orthogonal_term(probs_list, labels, diversity)
    return ce + ortho * (rho * np.asarray(mask, dtype=np.float64))


def multisample_ce(probs_list, labels) -> Tensor:
    ce = None
    for p in probs_list:
        term = cross_entropy(p, labels)
        ce = term if ce is None else ce + term
    return ce * (1.0 / len(probs_list))


def std_loss(probs: Tensor, labels) -> Tensor:
    """Sample standard deviation (divisor C-2) of the C-1 wrong-category probabilities."""
    probs = ensure_tensor(probs)
    C = probs.shape[1]
    if C < 3:
        raise ValueError("the STD loss is undefined for C < 3")
    m = wrong_mask(labels, C)
    mean = (probs * m).sum(axis=1, keepdims=True) * (1.0 / (C - 1))
    dev = (probs - mean) * m
    var = (dev * dev).sum(axis=1) * (1.0 / (C - 2))
    return safe_sqrt(var)


def flatten_wrong(probs, labels) -> np.ndarray:
    """Replace every wrong-category probability by their mean (zero STD), keeping p[label]."""
    p = np.array(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    m = wrong_mask(labels, p.shape[1])
    mean = (p * m).sum(axis=1, keepdims=True) / (p.shape[1] - 1)
    return np.where(m > 0, mean, p)


def sce_loss(probs: Tensor, labels, gamma: float) -> Tensor:
    """exp(gamma * STD) * CE."""
    return exp(std_loss(probs, labels) * gamma) * cross_entropy(probs, labels)


def skl_loss(p_adv: Tensor, p_nat: Tensor, labels, gamma: float) -> Tensor:
    """exp(gamma * STD(p_nat)) * KL(p_adv, p_nat); the STD factor uses the clean output."""
    return exp(std_loss(p_nat, labels) * gamma) * kl_divergence(p_adv, p_nat)


LOSS_KINDS = ("CE", "KL", "STD", "SCE", "SKL")


def loss_by_kind(kind: str, probs: Tensor, labels, gamma: float = 0.0, p_nat=None) -> Tensor:
    """Dispatch used by the attacks; KL-family kinds need the clean snapshot ``p_nat``."""
    if kind == "CE":
        return cross_entropy(probs, labels)
    if kind == "STD":
        return std_loss(probs, labels)
    if kind == "SCE":
        return sce_loss(probs, labels, gamma)
    if kind in ("KL", "SKL"):
        if p_nat is None:
            raise ValueError(f"{kind} loss needs the clean distribution f(x)")
        if kind == "KL":
            return kl_divergence(probs, p_nat)
        return skl_loss(probs, p_nat, labels, gamma)
    raise ValueError(f"unknown loss kind {kind!r}")
