"""L-infinity gradient attacks with a pluggable loss.

All attacks run the model in evaluation mode with parameters frozen, take
gradients with respect to the input only, and keep every iterate inside
``[x - eps, x + eps]`` intersected with ``[0, 1]``.

KL-family losses (``KL``, ``SKL``) compare against a snapshot of the clean
distribution f(x). Their gradient vanishes at x itself, so these attacks
always start from ``x + 0.001 * N(0, 1)`` (projected), as TRADES does.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .losses import LOSS_KINDS, loss_by_kind
from .tensor import NumericError, Tensor, softmax

ATTACK_KINDS = ("FGSM", "PGD", "MIFGSM", "APGD")
KL_NOISE = 1e-3


@dataclass
class AttackSpec:
    kind: str = "PGD"
    epsilon: float = 0.1
    alpha: float | None = None
    steps: int = 20
    loss_kind: str = "CE"
    gamma: float = 0.0
    momentum: float = 1.0
    random_start: bool = True
    # APGD schedule constants (Croce & Hein 2020)
    apgd_rho: float = 0.75
    apgd_p1: float = 0.22
    apgd_decr: float = 0.03
    apgd_min: float = 0.06

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"attack kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.kind == "FGSM":
            self.steps = 1
            self.alpha = self.epsilon
        if self.alpha is None:
            self.alpha = self.epsilon / 4.0
        if self.alpha < 0 or self.alpha > self.epsilon or (self.alpha == 0 and self.epsilon > 0):
            raise ValueError(f"need 0 < alpha <= epsilon, got alpha={self.alpha}, epsilon={self.epsilon}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.kind == "APGD" and self.steps < 2:
            raise ValueError("APGD needs steps >= 2")
        if self.kind == "MIFGSM" and self.momentum <= 0:
            raise ValueError("MIFGSM momentum decay must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


@dataclass
class AdvBatch:
    x_adv: np.ndarray
    success: np.ndarray
    pred_before: np.ndarray
    pred_after: np.ndarray
    loss_final: np.ndarray
    # one row per evaluated iterate, shape [n_iterates, B]
    losses: np.ndarray
    step_sizes: list = field(default_factory=list)


def project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def _requires_std(loss_kind: str, num_classes: int) -> None:
    if loss_kind in ("STD", "SCE", "SKL") and num_classes < 3:
        raise ValueError(f"{loss_kind} attacks need C >= 3 (STD loss undefined for C = 2)")


class _Objective:
    """Per-example loss and input gradient at a point, with the clean snapshot held fixed."""

    def __init__(self, model, x, y, loss_kind, gamma=0.0, loss_fn=None):
        self.model = model
        self.y = np.asarray(y)
        self.loss_kind = loss_kind
        self.gamma = gamma
        self.loss_fn = loss_fn
        self.p_nat = None
        if loss_fn is None and loss_kind in ("KL", "SKL"):
            self.p_nat = Tensor(model.predict_proba(x))

    def __call__(self, x_point: np.ndarray):
        xt = Tensor(x_point, requires_grad=True)
        logits = self.model.forward(xt)
        probs = softmax(logits)
        if self.loss_fn is not None:
            per_example = self.loss_fn(probs, self.y)
        else:
            per_example = loss_by_kind(self.loss_kind, probs, self.y, self.gamma, self.p_nat)
        per_example.sum().backward()
        grad = xt.grad if xt.grad is not None else np.zeros_like(x_point)
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite input gradient during attack")
        return per_example.data.copy(), grad, logits.data.argmax(axis=1)


def _start_point(x, eps, random_start, kl_family, rng):
    if kl_family:
        return project(x + KL_NOISE * rng.standard_normal(x.shape), x, eps)
    if random_start and eps > 0:
        return project(x + rng.uniform(-eps, eps, size=x.shape), x, eps)
    return x.copy()


def sign_gradient_attack(model, x, y, epsilon, alpha, steps, loss_kind="CE", gamma=0.0,
                         random_start=True, rng=None, loss_fn=None, momentum=None):
    """Iterated sign-gradient ascent with projection (PGD; MIFGSM when momentum is set).

    ``loss_fn(probs, y) -> per-example Tensor`` overrides ``loss_kind``; the
    training loops use it for their inner maximisation.
    Returns ``(x_adv, losses)`` where ``losses`` has one row per iterate.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    objective = _Objective(model, x, y, loss_kind, gamma, loss_fn)
    kl_family = loss_fn is None and loss_kind in ("KL", "SKL")
    x_adv = _start_point(x, epsilon, random_start, kl_family, rng)
    g_acc = np.zeros_like(x)
    losses = []
    with model.frozen():
        for _ in range(steps):
            loss, grad, _ = objective(x_adv)
            losses.append(loss)
            if momentum is not None:
                l1 = np.abs(grad).reshape(len(grad), -1).sum(axis=1).reshape(-1, *([1] * (grad.ndim - 1)))
                g_acc = momentum * g_acc + grad / np.maximum(l1, 1e-12)
                direction = np.sign(g_acc)
            else:
                direction = np.sign(grad)
            x_adv = project(x_adv + alpha * direction, x, epsilon)
        loss, _, _ = objective(x_adv)
        losses.append(loss)
    return x_adv, np.array(losses)


def _finish(model, x, y, x_adv, losses, step_sizes=None, loss_final=None) -> AdvBatch:
    pred_before = model.predict(x)
    pred_after = model.predict(x_adv)
    y = np.asarray(y)
    success = (pred_before == y) & (pred_after != y)
    return AdvBatch(
        x_adv=x_adv,
        success=success,
        pred_before=pred_before,
        pred_after=pred_after,
        loss_final=losses[-1] if loss_final is None else loss_final,
        losses=losses,
        step_sizes=step_sizes or [],
    )


def fgsm(model, x, y, spec: AttackSpec, rng=None) -> AdvBatch:
    """x_adv = clip01(x + eps * sign(grad_x L)); the loss comes from ``spec.loss_kind``."""
    _requires_std(spec.loss_kind, model.num_classes)
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    objective = _Objective(model, x, y, spec.loss_kind, spec.gamma)
    with model.frozen():
        if spec.loss_kind in ("KL", "SKL"):
            start = project(x + KL_NOISE * rng.standard_normal(x.shape), x, spec.epsilon)
        else:
            start = x
        loss0, grad, _ = objective(start)
        x_adv = np.clip(x + spec.epsilon * np.sign(grad), 0.0, 1.0)
        loss1, _, _ = objective(x_adv)
    return _finish(model, x, y, x_adv, np.array([loss0, loss1]))


def pgd(model, x, y, spec: AttackSpec, rng=None) -> AdvBatch:
    _requires_std(spec.loss_kind, model.num_classes)
    x_adv, losses = sign_gradient_attack(
        model, x, y, spec.epsilon, spec.alpha, spec.steps, spec.loss_kind, spec.gamma,
        spec.random_start, rng)
    return _finish(model, np.asarray(x, dtype=np.float64), y, x_adv, losses)


def mifgsm(model, x, y, spec: AttackSpec, rng=None) -> AdvBatch:
    """Momentum iterative FGSM: g <- mu*g + grad/||grad||_1, step alpha*sign(g)."""
    _requires_std(spec.loss_kind, model.num_classes)
    x_adv, losses = sign_gradient_attack(
        model, x, y, spec.epsilon, spec.alpha, spec.steps, spec.loss_kind, spec.gamma,
        spec.random_start, rng, momentum=spec.momentum)
    return _finish(model, np.asarray(x, dtype=np.float64), y, x_adv, losses)


def apgd_checkpoints(n_iter: int, p1: float = 0.22, decr: float = 0.03, pmin: float = 0.06) -> list:
    """Iterations at which APGD may halve its step size.

    The gaps follow p_{j+1} - p_j = max(p_j - p_{j-1} - decr, pmin) with p_1 = p1,
    evaluated in whole iterations as the reference implementation does:
    first gap max(int(p1 * n), 1), each later gap shrinks by max(int(decr * n), 1)
    down to max(int(pmin * n), 1). For n = 100: 22, 41, 57, 70, 80, 87, 93, 99.
    """
    gap = max(int(p1 * n_iter), 1)
    shrink = max(int(decr * n_iter), 1)
    floor = max(int(pmin * n_iter), 1)
    ws, w = [], 0
    while w + gap <= n_iter:
        w += gap
        ws.append(w)
        gap = max(gap - shrink, floor)
    return ws


def apgd(model, x, y, spec: AttackSpec, rng=None) -> AdvBatch:
    """Auto-PGD: momentum sign steps, step-size halving at checkpoints, restart from best.

    Returns the per-example best-loss iterate.
    """
    _requires_std(spec.loss_kind, model.num_classes)
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    eps, n_iter = spec.epsilon, spec.steps
    objective = _Objective(model, x, y, spec.loss_kind, spec.gamma)
    kl_family = spec.loss_kind in ("KL", "SKL")
    B = len(x)
    bshape = (B,) + (1,) * (x.ndim - 1)
    checkpoints = set(apgd_checkpoints(n_iter, spec.apgd_p1, spec.apgd_decr, spec.apgd_min))

    with model.frozen():
        x_cur = _start_point(x, eps, spec.random_start, kl_family, rng)
        loss, grad, _ = objective(x_cur)
        losses = [loss]
        x_best, loss_best, grad_best = x_cur.copy(), loss.copy(), grad.copy()
        step = np.full(B, 2.0 * eps)
        step_sizes = [step.copy()]
        x_prev = x_cur.copy()
        last_check = 0
        loss_best_last = loss_best.copy()
        reduced_last = np.ones(B, dtype=bool)
        for k in range(n_iter):
            a = 1.0 if k == 0 else 0.75
            z = project(x_cur + step.reshape(bshape) * np.sign(grad), x, eps)
            x_next = project(x_cur + a * (z - x_cur) + (1.0 - a) * (x_cur - x_prev), x, eps)
            x_prev, x_cur = x_cur, x_next
            loss, grad, _ = objective(x_cur)
            losses.append(loss)
            better = loss > loss_best
            x_best[better] = x_cur[better]
            grad_best[better] = grad[better]
            loss_best[better] = loss[better]
            it = k + 1
            if it in checkpoints and it < n_iter:
                window = np.array(losses[last_check:it + 1])
                n_incr = (window[1:] > window[:-1]).sum(axis=0)
                oscillating = n_incr <= spec.apgd_rho * (it - last_check)
                stalled = (~reduced_last) & (loss_best_last >= loss_best)
                halve = oscillating | stalled
                reduced_last = halve.copy()
                loss_best_last = loss_best.copy()
                step[halve] /= 2.0
                x_cur[halve] = x_best[halve]
                grad[halve] = grad_best[halve]
                # restarting from the best point resets the momentum memory
                x_prev[halve] = x_cur[halve]
                step_sizes.append(step.copy())
                last_check = it
    return _finish(model, x, y, x_best, np.array(losses), step_sizes, loss_final=loss_best)


ATTACKS = {"FGSM": fgsm, "PGD": pgd, "MIFGSM": mifgsm, "APGD": apgd}


def run_attack(model, x, y, spec: AttackSpec, rng=None, batch_size: int = 500) -> AdvBatch:
    """Run the attack named by ``spec.kind`` over a dataset in independent batches."""
    fn = ATTACKS[spec.kind]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    rng = rng if rng is not None else np.random.default_rng(0)
    parts = [fn(model, x[i:i + batch_size], y[i:i + batch_size], spec, rng)
             for i in range(0, len(x), batch_size)]
    if len(parts) == 1:
        return parts[0]
    n_rows = min(p.losses.shape[0] for p in parts)
    return AdvBatch(
        x_adv=np.concatenate([p.x_adv for p in parts]),
        success=np.concatenate([p.success for p in parts]),
        pred_before=np.concatenate([p.pred_before for p in parts]),
        pred_after=np.concatenate([p.pred_after for p in parts]),
        loss_final=np.concatenate([p.loss_final for p in parts]),
        losses=np.concatenate([p.losses[:n_rows] for p in parts], axis=1),
    )


def evaluate_robustness(model, dataset, spec: AttackSpec, rng=None, return_batch: bool = False):
    """ASR over initially-correct examples and robust accuracy over all examples."""
    x, y = dataset.inputs, dataset.labels
    if len(x) == 0:
        raise ValueError("cannot evaluate robustness on an empty dataset")
    adv = run_attack(model, x, y, spec, rng)
    correct_before = adv.pred_before == y
    n_correct = int(correct_before.sum())
    metrics = {
        "attack": spec.kind,
        "loss": spec.loss_kind,
        "epsilon": float(spec.epsilon),
        "n": int(len(y)),
        "natural_accuracy": float(correct_before.mean()),
        "robust_accuracy": float((adv.pred_after == y).mean()),
        "asr": float(adv.success.sum() / n_correct) if n_correct else 0.0,
    }
    return (metrics, adv) if return_batch else metrics


def write_attack_csv(path, x, y, adv: AdvBatch) -> None:
    linf = np.abs(adv.x_adv - x).reshape(len(x), -1).max(axis=1) if len(x) else np.zeros(0)
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "true_label", "pred_before", "pred_after", "linf_norm", "loss_final"])
        for i in range(len(y)):
            writer.writerow([i, int(y[i]), int(adv.pred_before[i]), int(adv.pred_after[i]),
                             f"{linf[i]:.6f}", f"{adv.loss_final[i]:.6f}"])


def with_overrides(spec: AttackSpec, **kw) -> AttackSpec:
    """Copy of ``spec`` with fields replaced; FGSM re-derives alpha from epsilon."""
    if "epsilon" in kw and "alpha" not in kw:
        kw["alpha"] = None
    return replace(spec, **kw)
