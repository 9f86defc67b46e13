"""Natural and adversarial training, with and without confidence-threshold reduction.

Natural methods:  NaturalCE (single dropout sample), NaturalMSD (mean CE over K
dropout samples), NaturalMDL (MSD plus the masked orthogonal term).
Adversarial methods: MadryAT, FastAT, FreeAT (objective SCE, CE at gamma=0)
and TRADES (SCE + beta * SKL, CE + beta * KL at gamma=0).
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from .attacks import AttackSpec, evaluate_robustness, project, sign_gradient_attack
from .tensor import Tensor, softmax

NATURAL_METHODS = ("NaturalCE", "NaturalMSD", "NaturalMDL")
MADRY_FAMILY = ("MadryAT", "FastAT", "FreeAT")
METHODS = NATURAL_METHODS + MADRY_FAMILY + ("TRADES",)
SCHEDULERS = ("Multistep", "Cyclic")


@dataclass
class TrainSpec:
    method: str = "NaturalMDL"
    gamma: float = 0.0
    beta: float = 6.0
    K: int = 4
    rho: float = 1.0
    eta: float = 100.0
    diversity: str = "cosine"
    epochs: int = 10
    batch_size: int = 128
    scheduler: str = "Multistep"
    lr: float = 0.01
    lr_min: float = 0.0
    milestones: tuple = (0.5, 0.75)
    lr_decay: float = 0.1
    warmup: bool = False
    warmup_epochs: int | None = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    replays: int = 8
    epsilon: float = 0.1
    inner_steps: int = 7
    inner_alpha: float | None = None
    fast_alpha: float | None = None
    trades_noise: float = 1e-3

    def __post_init__(self):
        self.milestones = tuple(float(m) for m in self.milestones)
        self.validate()

    def validate(self) -> None:
        def bad(msg):
            raise ValueError(msg)

        if self.method not in METHODS:
            bad(f"method must be one of {METHODS}, got {self.method!r}")
        if self.gamma < 0:
            bad("gamma must be >= 0")
        if self.beta < 0:
            bad("beta must be >= 0")
        if self.rho < 0:
            bad("rho must be >= 0")
        if not 0 < self.eta <= 100:
            bad("eta must lie in (0, 100]")
        if self.diversity not in L.DIVERSITIES:
            bad(f"diversity must be one of {tuple(L.DIVERSITIES)}")
        if self.method == "NaturalMDL" and self.K < 2:
            bad("NaturalMDL needs K >= 2")
        if self.K < 1:
            bad("K must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            bad("epochs and batch_size must be >= 1")
        if self.scheduler not in SCHEDULERS:
            bad(f"scheduler must be one of {SCHEDULERS}")
        if self.lr < 0 or self.lr_min < 0:
            bad("learning rates must be >= 0")
        if any(not 0 < m < 1 for m in self.milestones):
            bad("milestones are fractions of training in (0, 1)")
        if self.replays < 1:
            bad("replays must be >= 1")
        if not 0 <= self.epsilon <= 1:
            bad("epsilon must lie in [0, 1]")
        if self.inner_steps < 1:
            bad("inner_steps must be >= 1")
        if self.method == "TRADES" and self.beta <= 0:
            bad("TRADES needs beta > 0")

    @property
    def adversarial(self) -> bool:
        return self.method not in NATURAL_METHODS


# -- learning-rate schedules ---------------------------------------------------

def warmup_factors(I: int) -> list:
    """kappa_1..kappa_{I+1}: kappa_1 = 0.001, kappa_{i+1} = kappa_i (1 - i/I) + i/I."""
    if I < 1:
        return [1.0]
    kappa = [0.001]
    for i in range(1, I + 1):
        kappa.append(kappa[-1] * (1.0 - i / I) + i / I)
    return kappa


@dataclass
class LrSchedule:
    kind: str = "Multistep"
    lr: float = 0.01
    lr_min: float = 0.0
    total_epochs: int = 10
    milestones: tuple = (0.5, 0.75)
    decay: float = 0.1
    warmup_epochs: int = 0
    kappa: list = field(default_factory=list)

    def __post_init__(self):
        self.kappa = warmup_factors(self.warmup_epochs) if self.warmup_epochs > 0 else []

    @classmethod
    def from_spec(cls, spec: TrainSpec) -> "LrSchedule":
        warm = 0
        if spec.warmup:
            warm = spec.warmup_epochs if spec.warmup_epochs is not None else max(1, round(spec.epochs / 10))
        return cls(spec.scheduler, spec.lr, spec.lr_min, spec.epochs, spec.milestones, spec.lr_decay, warm)


def lr_at(schedule: LrSchedule, epoch: float) -> float:
    """Learning rate at a (possibly fractional) 0-based epoch position.

    Multistep drops by ``decay`` at each milestone fraction; Cyclic is one
    triangle from ``lr_min`` up to ``lr`` at mid-training and back. With
    warmup, epoch index e < I (0-based) is multiplied by kappa_{e+1}.
    """
    total = schedule.total_epochs
    if schedule.kind == "Multistep":
        passed = sum(1 for m in schedule.milestones if epoch >= int(round(m * total)))
        lr = schedule.lr * schedule.decay ** passed
    elif schedule.kind == "Cyclic":
        t = min(max(epoch / total, 0.0), 1.0)
        lr = schedule.lr_min + (schedule.lr - schedule.lr_min) * (1.0 - abs(2.0 * t - 1.0))
    else:
        raise ValueError(f"unknown scheduler {schedule.kind!r}")
    e = int(epoch)
    if schedule.kappa and e < schedule.warmup_epochs:
        lr *= schedule.kappa[e]
    return lr


# -- optimiser ---------------------------------------------------------------

class SGD:
    """SGD with heavy-ball momentum and L2 weight decay (PyTorch update order)."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [None] * len(self.params)

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            if self.momentum:
                buf = g.copy() if self.buffers[i] is None else self.momentum * self.buffers[i] + g
                self.buffers[i] = buf
                g = buf
            p.data = p.data - lr * g

    def state(self) -> list:
        return [None if b is None else b.copy() for b in self.buffers]

    def load_state(self, buffers) -> None:
        self.buffers = [None if b is None else np.array(b) for b in buffers]


# -- RNG streams -------------------------------------------------------------

STREAMS = ("init", "dropout", "attack", "shuffle")


def make_rngs(seed: int) -> dict:
    """One seeded generator per purpose, split from a single seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}


# -- objectives ----------------------------------------------------------------

def natural_objective(model, x, y, spec: TrainSpec, rng) -> Tensor:
    """Mean batch loss for the natural methods (model must be in train mode)."""
    if spec.method == "NaturalCE":
        return L.cross_entropy(softmax(model.forward(Tensor(x), rng)), y).mean()
    outs = model.forward_multisample(Tensor(x), spec.K, rng)
    if spec.method == "NaturalMSD":
        return L.multisample_ce(outs.probs, y).mean()
    mask = L.compute_mask(outs.mean_probs(), y, spec.eta)
    return L.mdl_loss(outs.probs, y, mask, spec.rho, spec.diversity).mean()


def madry_objective(model, x_adv, y, gamma: float) -> Tensor:
    """SCE(f(x*), y | gamma) averaged over the batch."""
    return L.sce_loss(softmax(model.forward(Tensor(x_adv))), y, gamma).mean()


def trades_objective(model, x, x_adv, y, gamma: float, beta: float) -> Tensor:
    """SCE(f(x), y | gamma) + beta * SKL(f(x*), f(x), y | gamma), batch mean."""
    p_nat = softmax(model.forward(Tensor(x)))
    p_adv = softmax(model.forward(Tensor(x_adv)))
    return (L.sce_loss(p_nat, y, gamma) + L.skl_loss(p_adv, p_nat, y, gamma) * beta).mean()


def sce_loss_fn(gamma: float):
    return lambda probs, y: L.sce_loss(probs, y, gamma)


def madry_adversary(model, x, y, spec: TrainSpec, rng, loss_fn=None) -> np.ndarray:
    """Inner maximisation for MadryAT (PGD-k with random start) and FastAT (one FGSM step)."""
    loss_fn = loss_fn or sce_loss_fn(spec.gamma)
    eps = spec.epsilon
    if spec.method == "FastAT":
        alpha = spec.fast_alpha if spec.fast_alpha is not None else 1.25 * eps
        x_adv, _ = sign_gradient_attack(model, x, y, eps, alpha, 1, random_start=True, rng=rng,
                                        loss_fn=loss_fn)
        return x_adv
    alpha = spec.inner_alpha if spec.inner_alpha is not None else eps / 4.0
    x_adv, _ = sign_gradient_attack(model, x, y, eps, alpha, spec.inner_steps, random_start=True,
                                    rng=rng, loss_fn=loss_fn)
    return x_adv


def trades_adversary(model, x, y, spec: TrainSpec, rng) -> np.ndarray:
    """Maximise SKL(f(x'), f(x), y | gamma) from x + N(0, noise^2), clean output fixed."""
    p_nat = Tensor(model.predict_proba(x))
    eps = spec.epsilon
    alpha = spec.inner_alpha if spec.inner_alpha is not None else eps / 4.0
    x_adv = project(x + spec.trades_noise * rng.standard_normal(x.shape), x, eps)
    with model.frozen():
        for _ in range(spec.inner_steps):
            xt = Tensor(x_adv, requires_grad=True)
            L.skl_loss(softmax(model.forward(xt)), p_nat, y, spec.gamma).sum().backward()
            x_adv = project(x_adv + alpha * np.sign(xt.grad), x, eps)
    return x_adv


# -- training loop -------------------------------------------------------------

@dataclass
class History:
    records: list = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)

    def column(self, key: str) -> list:
        return [r.get(key) for r in self.records]


def history_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def accuracy(model, x, y, batch_size: int = 1000) -> float:
    if len(y) == 0:
        raise ValueError("accuracy of an empty dataset")
    return float((model.predict(x) == np.asarray(y)).mean())


class Trainer:
    """Owns a model, its optimiser and RNG streams for one training run.

    ``fit`` appends one history record per epoch and, when ``out_dir`` is given,
    writes ``history.jsonl`` and a resumable ``state.npz`` after every epoch.
    """

    def __init__(self, spec: TrainSpec, model, rngs: dict | None = None, eval_attack: AttackSpec | None = None,
                 record_wall_time: bool = False, eval_batch: int | None = None):
        self.spec = spec
        self.model = model
        self.rngs = rngs or make_rngs(spec.seed)
        self.schedule = LrSchedule.from_spec(spec)
        self.opt = SGD(model.parameters(), spec.momentum, spec.weight_decay)
        self.history = History()
        self.eval_attack = eval_attack
        self.record_wall_time = record_wall_time
        self.eval_batch = eval_batch
        self.epoch = 0
        self.free_delta = None
        if spec.gamma > 0 and spec.adversarial and model.num_classes < 3:
            raise ValueError("gamma > 0 needs C >= 3 (STD loss undefined for C = 2)")
        if spec.method in ("NaturalMSD", "NaturalMDL") and spec.K < 1:
            raise ValueError("K must be >= 1")

    # one optimisation step per method; each returns the scalar loss value
    def _sgd_step(self, loss: Tensor, lr: float) -> float:
        self.model.zero_grad()
        loss.backward()
        self.opt.step(lr)
        return loss.item()

    def step_natural(self, x, y, lr) -> float:
        self.model.train()
        return self._sgd_step(natural_objective(self.model, x, y, self.spec, self.rngs["dropout"]), lr)

    def step_madry(self, x, y, lr, loss_fn=None) -> float:
        x_adv = madry_adversary(self.model, x, y, self.spec, self.rngs["attack"], loss_fn)
        self.model.eval()
        if loss_fn is None:
            loss = madry_objective(self.model, x_adv, y, self.spec.gamma)
        else:
            loss = loss_fn(softmax(self.model.forward(Tensor(x_adv))), y).mean()
        return self._sgd_step(loss, lr)

    def step_free(self, x, y, lr_fn) -> float:
        """m replays on one minibatch, each reusing a single backward pass for
        the parameter update and the perturbation update."""
        spec = self.spec
        self.model.eval()
        n = len(x)
        if self.free_delta is None:
            self.free_delta = np.zeros((spec.batch_size,) + x.shape[1:])
        total = 0.0
        for r in range(spec.replays):
            delta = self.free_delta[:n]
            xt = Tensor(np.clip(x + delta, 0.0, 1.0), requires_grad=True)
            loss = L.sce_loss(softmax(self.model.forward(xt)), y, spec.gamma).mean()
            self.model.zero_grad()
            loss.backward()
            self.opt.step(lr_fn(r))
            self.free_delta[:n] = np.clip(delta + spec.epsilon * np.sign(xt.grad), -spec.epsilon, spec.epsilon)
            total += loss.item()
        return total / spec.replays

    def step_trades(self, x, y, lr) -> float:
        x_adv = trades_adversary(self.model, x, y, self.spec, self.rngs["attack"])
        self.model.eval()
        return self._sgd_step(trades_objective(self.model, x, x_adv, y, self.spec.gamma, self.spec.beta), lr)

    def run_epoch(self, x_train, y_train) -> float:
        spec = self.spec
        order = self.rngs["shuffle"].permutation(len(x_train))
        n_batches = max(1, int(np.ceil(len(order) / spec.batch_size)))
        losses = []
        for b in range(n_batches):
            idx = order[b * spec.batch_size:(b + 1) * spec.batch_size]
            x, y = x_train[idx], y_train[idx]
            pos = self.epoch + (b + 1) / n_batches
            lr = lr_at(self.schedule, min(pos, self.epoch + 1 - 1e-9))
            if spec.method in NATURAL_METHODS:
                losses.append(self.step_natural(x, y, lr))
            elif spec.method == "FreeAT":
                losses.append(self.step_free(x, y, lambda r: lr))
            elif spec.method == "TRADES":
                losses.append(self.step_trades(x, y, lr))
            else:
                losses.append(self.step_madry(x, y, lr))
        self.model.eval()
        return float(np.mean(losses))

    def fit(self, train_set, test_set=None, out_dir=None, until: int | None = None) -> History:
        """Train up to ``spec.epochs`` (or stop early after epoch ``until``)."""
        out = Path(out_dir) if out_dir is not None else None
        eval_set = test_set if test_set is not None else train_set
        stop = self.spec.epochs if until is None else min(until, self.spec.epochs)
        while self.epoch < stop:
            t0 = time.perf_counter()
            lr = lr_at(self.schedule, self.epoch)
            train_loss = self.run_epoch(train_set.inputs, train_set.labels)
            record = {
                "epoch": self.epoch + 1,
                "lr": lr,
                "train_loss": train_loss,
                "nat_acc": accuracy(self.model, eval_set.inputs, eval_set.labels),
            }
            if self.eval_attack is not None:
                subset = eval_set if self.eval_batch is None else eval_set.head(self.eval_batch)
                metrics = evaluate_robustness(self.model, subset, self.eval_attack,
                                              rng=np.random.default_rng(self.epoch))
                record["robust_acc"] = metrics["robust_accuracy"]
            if self.record_wall_time:
                record["wall_ms"] = int((time.perf_counter() - t0) * 1000)
            self.epoch += 1
            self.history.append(record)
            if out is not None:
                with open(out / "history.jsonl", "a") as fh:
                    fh.write(history_line(record) + "\n")
                self.save_state(out / "state.npz")
        return self.history

    # -- resumable state ---------------------------------------------------------
    def save_state(self, path) -> None:
        arrays = {f"param/{k}": v for k, v in self.model.state_dict().items()}
        for i, b in enumerate(self.opt.state()):
            if b is not None:
                arrays[f"momentum/{i}"] = b
        if self.free_delta is not None:
            arrays["free_delta"] = self.free_delta
        meta = {
            "epoch": self.epoch,
            "spec": asdict(self.spec),
            "rng": {k: r.bit_generator.state for k, r in self.rngs.items()},
            "model": self.model.meta(),
            "history": self.history.records,
        }
        arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
        tmp = Path(str(path) + ".tmp")
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        tmp.replace(path)

    def load_state(self, path) -> None:
        with np.load(Path(path), allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            self.model.load_state_dict({k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")})
            bufs = [None] * len(self.opt.params)
            for k in data.files:
                if k.startswith("momentum/"):
                    bufs[int(k.split("/")[1])] = data[k]
            self.opt.load_state(bufs)
            self.free_delta = data["free_delta"] if "free_delta" in data.files else None
        for k, state in meta["rng"].items():
            self.rngs[k].bit_generator.state = state
        self.epoch = meta["epoch"]
        self.history = History(list(meta["history"]))


def train_natural(spec: TrainSpec, model, train_set, test_set=None, **kw):
    if spec.method not in NATURAL_METHODS:
        raise ValueError(f"train_natural got adversarial method {spec.method}")
    trainer = Trainer(spec, model, **kw)
    return model, trainer.fit(train_set, test_set)


def train_madry_family(spec: TrainSpec, model, train_set, test_set=None, **kw):
    if spec.method not in MADRY_FAMILY:
        raise ValueError(f"train_madry_family got {spec.method}")
    trainer = Trainer(spec, model, **kw)
    return model, trainer.fit(train_set, test_set)


def train_trades(spec: TrainSpec, model, train_set, test_set=None, **kw):
    if spec.method != "TRADES":
        raise ValueError(f"train_trades got {spec.method}")
    trainer = Trainer(spec, model, **kw)
    return model, trainer.fit(train_set, test_set)


def train(spec: TrainSpec, model, train_set, test_set=None, **kw):
    if spec.method in NATURAL_METHODS:
        return train_natural(spec, model, train_set, test_set, **kw)
    if spec.method in MADRY_FAMILY:
        return train_madry_family(spec, model, train_set, test_set, **kw)
    return train_trades(spec, model, train_set, test_set, **kw)
