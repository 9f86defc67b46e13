"""Datasets (IDX files, synthetic blobs) and run-configuration parsing.

IDX layout (big-endian): magic ``0x00000803`` then ``n, rows, cols`` as uint32
followed by ``n*rows*cols`` uint8 pixels for images; magic ``0x00000801``
then ``n`` as uint32 followed by ``n`` uint8 labels for labels.

Run configs are one JSON document; see :class:`RunConfig` and the README.
"""
from __future__ import annotations

import dataclasses
import gzip
import json
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackSpec
from .training import TrainSpec

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
SCHEMA_VERSION = 1


class FormatError(ValueError):
    pass


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        if x.ndim != 2 or len(x) != len(self.labels):
            raise ValueError(f"inputs {x.shape} do not match {len(self.labels)} labels")
        self.inputs = x
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("dataset inputs must be finite")
        if self.inputs.size and (self.inputs.min() < 0 or self.inputs.max() > 1):
            raise ValueError("dataset inputs must lie in [0, 1]")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def head(self, n: int) -> "Dataset":
        return Dataset(self.inputs[:n], self.labels[:n], self.num_classes, self.split)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, self.split)


# -- IDX ----------------------------------------------------------------------

def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, expected_magic: int, ndims: int):
    with _open(path) as fh:
        raw = fh.read()
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)}")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0 (expected 0x{expected_magic:08x})")
    dims = struct.unpack(f">{ndims}I", raw[4:header])
    n_bytes = int(np.prod(dims))
    if len(raw) - header < n_bytes:
        raise FormatError(f"{path}: truncated data at byte offset {len(raw)} (need {header + n_bytes})")
    data = np.frombuffer(raw, dtype=np.uint8, count=n_bytes, offset=header)
    return dims, data


def load_idx(images_path, labels_path, limit: int | None = None, num_classes: int = 10,
             split: str = "train") -> Dataset:
    """Read an IDX image/label pair; pixels are scaled by 1/255."""
    (n_img, rows, cols), pixels = _read_idx(images_path, IMAGES_MAGIC, 3)
    (n_lab,), labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise FormatError(f"{images_path}: {n_img} images but {labels_path} has {n_lab} labels (byte offset 4)")
    n = n_img if limit is None else min(int(limit), n_img)
    x = pixels[: n * rows * cols].reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(x, labels[:n].astype(np.int64), num_classes, split)


def write_idx(dataset_pixels: np.ndarray, labels: np.ndarray, images_path, labels_path, side: int | None = None) -> None:
    """Write uint8 pixels [N, side*side] (or [N, side, side]) and labels as an IDX pair."""
    pixels = np.asarray(dataset_pixels)
    n = len(pixels)
    if side is None:
        side = pixels.shape[1] if pixels.ndim == 3 else int(round(math.sqrt(pixels.shape[1])))
    pixels = pixels.reshape(n, side * side)
    if pixels.dtype != np.uint8:
        if pixels.min() < 0 or pixels.max() > 255:
            raise ValueError("pixels must lie in [0, 255]")
        pixels = np.round(pixels).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, side, side))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, n))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


# -- synthetic data ------------------------------------------------------------

def blob_centers(C: int, dim: int) -> np.ndarray:
    """Fixed, well-separated centers in [0.2, 0.8]^dim (independent of the data seed)."""
    rng = np.random.default_rng([C, dim, 7919])
    return rng.uniform(0.2, 0.8, size=(C, dim))


def synth_blobs(seed: int, n_per_class: int, C: int = 3, dim: int = 2, spread: float = 0.05,
                split: str = "train") -> Dataset:
    """C Gaussian clusters around fixed centers, clipped to [0, 1], class-sorted order shuffled."""
    if C < 3:
        raise ValueError("synth_blobs needs C >= 3")
    if dim < 2:
        raise ValueError("synth_blobs needs dim >= 2")
    if n_per_class < 0 or spread < 0:
        raise ValueError("n_per_class and spread must be >= 0")
    rng = np.random.default_rng(seed)
    centers = blob_centers(C, dim)
    labels = np.repeat(np.arange(C), n_per_class)
    x = centers[labels] + spread * rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    return Dataset(np.clip(x[order], 0.0, 1.0), labels[order], C, split)


def mnist_subset(images_dir=None, n_train: int = 2000, n_test: int = 1000, seed: int = 0):
    """Train/test MNIST subsets.

    Reads ``train-images-idx3-ubyte``/``train-labels-idx1-ubyte`` and the
    ``t10k-*`` pair from ``images_dir`` when given; otherwise falls back to the
    5000-example MNIST sample bundled with ``mlxtend`` (shuffled with ``seed``
    and split disjointly).
    """
    if images_dir is not None:
        d = Path(images_dir)

        def find(stem):
            for suffix in ("", ".gz"):
                if (d / (stem + suffix)).exists():
                    return d / (stem + suffix)
            raise FileNotFoundError(d / stem)

        train = load_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"), n_train)
        test = load_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"), n_test, split="test")
        return train, test
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    order = np.random.default_rng(seed).permutation(len(y))
    if n_train + n_test > len(y):
        raise ValueError(f"bundled sample has only {len(y)} examples")
    tr, te = order[:n_train], order[n_train:n_train + n_test]
    return (Dataset(x[tr] / 255.0, y[tr], 10, "train"), Dataset(x[te] / 255.0, y[te], 10, "test"))


# -- configuration ---------------------------------------------------------------

@dataclass
class DataConfig:
    kind: str = "blobs"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    mnist_dir: str | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    num_classes: int = 10
    n_per_class: int = 100
    test_n_per_class: int = 50
    classes: int = 3
    dim: int = 2
    spread: float = 0.05


@dataclass
class ModelConfig:
    arch: str = "mlp"
    hidden: list | None = None
    dropout: float = 0.5
    dropout_all: bool = False


@dataclass
class AnalysisConfig:
    thresholds: list | None = None
    eps_list: list = field(default_factory=lambda: [0.0, 0.05, 0.1, 0.15, 0.2])
    eval_limit: int | None = None
    track_robust: bool = False


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    record_wall_time: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSpec = field(default_factory=TrainSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainSpec,
             "attack": AttackSpec, "analysis": AnalysisConfig}


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return tuple(value)
    return value


def _build_section(name: str, cls, raw, overrides: dict):
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected an object")
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"{name}.{key}", "unknown key")
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else (
            f.default_factory() if f.default_factory is not dataclasses.MISSING else None)
        kwargs[key] = value if value is None else _coerce(f"{name}.{key}", value, default)
    kwargs.update(overrides)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        message = str(exc)
        hits = [(m.start(), k) for k in fields for m in [re.search(rf"\b{k}\b", message)] if m]
        key = f"{name}.{min(hits)[1]}" if hits else name
        raise ConfigError(key, message) from None


def config_from_dict(doc: dict, seed: int | None = None) -> RunConfig:
    """Validate a config document; unknown keys are rejected by full dotted name."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    if "schema_version" not in doc:
        raise ConfigError("schema_version", "missing (mandatory)")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {doc['schema_version']!r}")
    top = {"schema_version", "seed", "record_wall_time"} | set(_SECTIONS)
    for key in doc:
        if key not in top:
            raise ConfigError(key, "unknown key")
    run_seed = doc.get("seed", 0) if seed is None else seed
    run_seed = _coerce("seed", run_seed, 0)
    record_wall_time = _coerce("record_wall_time", doc.get("record_wall_time", False), False)
    sections = {}
    for name, cls in _SECTIONS.items():
        overrides = {"seed": run_seed} if name == "train" else {}
        sections[name] = _build_section(name, cls, doc.get(name, {}), overrides)
    cfg = RunConfig(SCHEMA_VERSION, run_seed, record_wall_time, **sections)
    _cross_validate(cfg)
    return cfg


def _cross_validate(cfg: RunConfig) -> None:
    if cfg.data.kind not in ("blobs", "idx", "mnist"):
        raise ConfigError("data.kind", f"must be 'blobs', 'idx' or 'mnist', got {cfg.data.kind!r}")
    if cfg.data.kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if getattr(cfg.data, key) is None:
                raise ConfigError(f"data.{key}", "required when data.kind is 'idx'")
    if cfg.data.kind == "blobs" and cfg.data.classes < 3:
        raise ConfigError("data.classes", "synthetic blobs need at least 3 classes")
    if cfg.model.arch not in ("mlp", "cnn"):
        raise ConfigError("model.arch", f"must be 'mlp' or 'cnn', got {cfg.model.arch!r}")
    if not 0.0 <= cfg.model.dropout < 1.0:
        raise ConfigError("model.dropout", "must lie in [0, 1)")
    eps = cfg.analysis.eps_list
    if any(not 0 <= e <= 1 for e in eps) or len(set(eps)) != len(eps):
        raise ConfigError("analysis.eps_list", "must be distinct values in [0, 1]")
    if cfg.analysis.thresholds is not None:
        th = cfg.analysis.thresholds
        if any(not 0 < t <= 1 for t in th) or any(b <= a for a, b in zip(th, th[1:])):
            raise ConfigError("analysis.thresholds", "must be strictly increasing values in (0, 1]")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``key.path=value`` strings (values parsed as JSON when possible)."""
    doc = json.loads(json.dumps(doc))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "cannot descend into a non-object")
        node[parts[-1]] = _parse_value(text)
    return doc


def parse_config(path, overrides=None, seed: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return config_from_dict(apply_overrides(doc, overrides), seed=seed)


def load_datasets(cfg: RunConfig):
    """(train, test) datasets described by ``cfg.data``."""
    d = cfg.data
    if d.kind == "blobs":
        train = synth_blobs(cfg.seed, d.n_per_class, d.classes, d.dim, d.spread, "train")
        test = synth_blobs(cfg.seed + 1_000_003, d.test_n_per_class, d.classes, d.dim, d.spread, "test")
        return train, test
    if d.kind == "idx":
        train = load_idx(d.train_images, d.train_labels, d.train_limit, d.num_classes, "train")
        test = load_idx(d.test_images, d.test_labels, d.test_limit, d.num_classes, "test")
        return train, test
    return mnist_subset(d.mnist_dir, d.train_limit or 2000, d.test_limit or 1000)
