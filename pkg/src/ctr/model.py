"""Small classifiers with a designated last feature layer for multi-sample dropout.

Checkpoint layout (``.npz``, written by :func:`save_checkpoint`):

* ``meta`` -- UTF-8 JSON string: ``{"format": "ctr-checkpoint", "version": 1,
  "arch": ..., "num_classes": C, "input_dim": D, "hidden": [...],
  "channels": [...], "dropout": rate, "dropout_all": bool,
  "param_names": [...]}``
* one float64 array per parameter, keyed by the names in ``param_names``
  (``W0, b0, W1, b1, ...`` for dense layers, ``K0, c0, ...`` for conv layers).
"""
from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor, ShapeError, conv2d, dropout, matmul, relu, softmax

CHECKPOINT_VERSION = 1


@dataclass
class SubNetOutputs:
    """K probability matrices (each [B, C]) produced from one shared feature pass."""

    probs: list
    logits: list

    @property
    def K(self) -> int:
        return len(self.probs)

    def mean_probs(self) -> np.ndarray:
        return np.mean([p.data for p in self.probs], axis=0)


def _he_uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Classifier:
    """Dense (optionally conv-fronted) ReLU classifier.

    The body maps inputs to the last feature layer; the head is a single dense
    layer to ``num_classes`` logits. Dropout is applied to the last feature
    layer; ``dropout_all`` additionally drops every earlier hidden layer.
    """

    def __init__(self, input_dim: int, num_classes: int, hidden=(256, 128), dropout: float = 0.5,
                 dropout_all: bool = False, channels=(), image_side: int | None = None,
                 rng: np.random.Generator | None = None, arch: str = "mlp"):
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not hidden:
            raise ValueError("at least one hidden layer is required (it is the feature layer)")
        self.arch = arch
        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)
        self.hidden = [int(h) for h in hidden]
        self.channels = [int(c) for c in channels]
        self.dropout = float(dropout)
        self.dropout_all = bool(dropout_all)
        self.image_side = image_side
        self.training = False
        rng = rng if rng is not None else np.random.default_rng(0)

        self.params: dict[str, Tensor] = {}
        width = self.input_dim
        if self.channels:
            side = image_side or int(round(np.sqrt(input_dim)))
            if side * side != input_dim:
                raise ShapeError("conv front-end needs square single-channel inputs")
            self.image_side = side
            in_c = 1
            for i, out_c in enumerate(self.channels):
                fan_in = in_c * 9
                self.params[f"K{i}"] = Tensor(_he_uniform(rng, fan_in, (out_c, in_c, 3, 3)), True)
                self.params[f"c{i}"] = Tensor(np.zeros(out_c), True)
                side = (side - 3) // 2 + 1
                in_c = out_c
            width = in_c * side * side
        for i, h in enumerate(self.hidden + [self.num_classes]):
            self.params[f"W{i}"] = Tensor(_he_uniform(rng, width, (width, h)), True)
            self.params[f"b{i}"] = Tensor(np.zeros(h), True)
            width = h

    # -- modes ------------------------------------------------------------
    def train(self) -> "Classifier":
        self.training = True
        return self

    def eval(self) -> "Classifier":
        self.training = False
        return self

    @contextmanager
    def frozen(self):
        """Evaluation mode with parameter gradients switched off (for attacks)."""
        was_training = self.training
        flags = {k: p.requires_grad for k, p in self.params.items()}
        self.training = False
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            self.training = was_training
            for k, p in self.params.items():
                p.requires_grad = flags[k]

    def parameters(self) -> list:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- forward passes ---------------------------------------------------
    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected input [B, {self.input_dim}], got {x.shape}")

    def features(self, x, rng: np.random.Generator | None = None) -> Tensor:
        """Last feature layer activations, before its dropout."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x)
        h = x
        if self.channels:
            side = self.image_side
            h = h.reshape(x.shape[0], 1, side, side)
            for i in range(len(self.channels)):
                h = relu(conv2d(h, self.params[f"K{i}"], self.params[f"c{i}"], stride=2))
            h = h.reshape(x.shape[0], -1)
        n_hidden = len(self.hidden)
        for i in range(n_hidden):
            h = relu(matmul(h, self.params[f"W{i}"]) + self.params[f"b{i}"])
            if i < n_hidden - 1 and self.dropout_all:
                h, _ = dropout(h, self.dropout, rng, self.training)
        return h

    def head(self, feats: Tensor) -> Tensor:
        last = len(self.hidden)
        return matmul(feats, self.params[f"W{last}"]) + self.params[f"b{last}"]

    def forward(self, x, rng: np.random.Generator | None = None) -> Tensor:
        feats = self.features(x, rng)
        feats, _ = dropout(feats, self.dropout, rng, self.training)
        return self.head(feats)

    __call__ = forward

    def forward_multisample(self, x, K: int, rng: np.random.Generator | None = None) -> SubNetOutputs:
        """Share one feature pass, then apply K independent dropout masks and heads."""
        if K < 1:
            raise ValueError(f"K must be >= 1, got {K}")
        feats = self.features(x, rng)
        logits, probs = [], []
        for _ in range(K):
            dropped, _ = dropout(feats, self.dropout, rng, self.training)
            z = self.head(dropped)
            logits.append(z)
            probs.append(softmax(z))
        return SubNetOutputs(probs=probs, logits=logits)

    def predict_proba(self, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        was = self.training
        self.training = False
        try:
            out = [softmax(self.forward(Tensor(x[i:i + batch_size]))).data
                   for i in range(0, len(x), batch_size)]
        finally:
            self.training = was
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))

    def logits(self, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        was = self.training
        self.training = False
        try:
            out = [self.forward(Tensor(x[i:i + batch_size])).data for i in range(0, len(x), batch_size)]
        finally:
            self.training = was
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.predict_proba(x).argmax(axis=1)

    # -- (de)serialisation ------------------------------------------------
    def meta(self) -> dict:
        return {
            "format": "ctr-checkpoint",
            "version": CHECKPOINT_VERSION,
            "arch": self.arch,
            "num_classes": self.num_classes,
            "input_dim": self.input_dim,
            "hidden": self.hidden,
            "channels": self.channels,
            "dropout": self.dropout,
            "dropout_all": self.dropout_all,
            "param_names": list(self.params),
        }

    def state_dict(self) -> dict:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.data.shape:
                raise ShapeError(f"parameter {k}: expected {p.data.shape}, got {state[k].shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def copy(self) -> "Classifier":
        other = Classifier.from_meta(self.meta())
        other.load_state_dict(self.state_dict())
        return other

    @classmethod
    def from_meta(cls, meta: dict) -> "Classifier":
        return cls(meta["input_dim"], meta["num_classes"], hidden=meta["hidden"],
                   dropout=meta["dropout"], dropout_all=meta["dropout_all"],
                   channels=meta.get("channels", []), arch=meta.get("arch", "mlp"))


def build_model(arch: str, input_dim: int, num_classes: int, dropout: float = 0.5,
                dropout_all: bool = False, hidden=None, rng=None) -> Classifier:
    """Reference architectures: ``mlp`` (in-256-128-C) and ``cnn`` (2 conv + 2 dense)."""
    if arch == "mlp":
        hidden = hidden or (256, 128)
        return Classifier(input_dim, num_classes, hidden, dropout, dropout_all, rng=rng, arch="mlp")
    if arch == "cnn":
        hidden = hidden or (64,)
        return Classifier(input_dim, num_classes, hidden, dropout, dropout_all,
                          channels=(8, 16), rng=rng, arch="cnn")
    raise ValueError(f"unknown architecture {arch!r}")


def save_checkpoint(model: Classifier, path) -> None:
    path = Path(path)
    arrays = {k: v for k, v in model.state_dict().items()}
    arrays["meta"] = np.array(json.dumps(model.meta(), sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Classifier:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != "ctr-checkpoint":
            raise ValueError(f"{path}: not a ctr checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        state = {k: data[k] for k in meta["param_names"]}
    model = Classifier.from_meta(meta)
    model.load_state_dict(state)
    return model
