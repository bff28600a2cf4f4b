"""Datasets, non-IID label-shard partitioning and mini-batch sampling."""

from __future__ import annotations

import gzip
import hashlib
import json
import logging
import math
import os
import struct
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import CapacityError, InvalidInputError, ParseError
from .models import Batch

log = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# (images, labels) file stems in the standard distribution layout
IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise InvalidInputError("feature rows and label count differ")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]


# -- IDX ---------------------------------------------------------------------

def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, expected_magic, kind):
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 8:
        raise ParseError(f"{path}: truncated header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != expected_magic:
        raise ParseError(f"{path}: bad magic 0x{magic:08x} for {kind} file (expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = math.prod(dims)
    body = raw[header:]
    if len(body) < size:
        raise ParseError(f"{path}: truncated data ({len(body)} of {size} bytes)")
    return np.frombuffer(body, dtype=np.uint8, count=size).reshape(dims)


def load_idx(images_path, labels_path, name: str = "idx") -> LabeledDataset:
    images = _read_idx(images_path, IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    features = images.reshape(images.shape[0], -1).astype(np.float32) / np.float32(255.0)
    return LabeledDataset(features, labels.astype(np.int64), name)


def write_idx(dataset_images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Write uint8 images ``(n, rows, cols)`` and labels ``(n,)`` in IDX format."""
    images = np.asarray(dataset_images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IMAGES_MAGIC))
        f.write(struct.pack(f">{images.ndim}I", *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def _find(root: Path, stem: str):
    # both the dash and dot spellings of the stems are common
    for name in (stem, stem.replace("-idx", ".idx")):
        for suffix in ("", ".gz"):
            candidate = root / (name + suffix)
            if candidate.exists():
                return candidate
    return None


def find_idx_dir(name: str, root=None) -> Path | None:
    """Locate a directory holding the four standard IDX files for ``name``."""
    roots = []
    if root:
        roots.append(Path(root))
    env = os.environ.get("FEDHIER_DATA_DIR")
    if env:
        roots.append(Path(env))
    for r in roots:
        for d in (r / name, r / name.upper(), r / name.lower(), r):
            if all(_find(d, stem) for pair in IDX_FILES.values() for stem in pair):
                return d
    return None


def load_mnist_like(name: str = "mnist", root=None) -> LabeledDataset:
    """Load and pool the train and test files of an MNIST-format dataset."""
    d = find_idx_dir(name, root)
    if d is None:
        raise FileNotFoundError(
            f"{name} IDX files not found; set FEDHIER_DATA_DIR or dataset.root "
            f"to a directory containing {', '.join(s for p in IDX_FILES.values() for s in p)}"
        )
    parts = [load_idx(_find(d, imgs), _find(d, labs), name) for imgs, labs in IDX_FILES.values()]
    return LabeledDataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        name,
    )


def synthetic_digits(n_per_class: int = 1000, num_classes: int = 10, side: int = 28,
                     seed: int = 0, noise: float = 0.15) -> LabeledDataset:
    """MNIST-shaped stand-in: random strokes per class with dropout, jitter and local clutter, values in [0, 1].

    Each class mixes three prototype images so that classes are not linearly trivial.
    """
    rng = np.random.default_rng(seed)
    inner = side - 8
    protos = []
    for _ in range(num_classes * 3):
        img = np.zeros((side, side))
        pts = rng.integers(4, 4 + inner, size=(6, 2))
        for (r0, c0), (r1, c1) in zip(pts[:-1], pts[1:]):
            for s in np.linspace(0.0, 1.0, 24):
                r, c = int(round(r0 + s * (r1 - r0))), int(round(c0 + s * (c1 - c0)))
                img[r - 1:r + 2, c - 1:c + 2] = 1.0
        protos.append(img.reshape(-1))
    protos = np.array(protos).reshape(num_classes, 3, side * side)

    labels = np.repeat(np.arange(num_classes), n_per_class)
    which = rng.integers(0, 3, size=labels.size)
    base = protos[labels, which]
    # drop a random fraction of stroke pixels and shift each image by up to 2 pixels
    base = base * (rng.random(base.shape) > 0.25)
    shifts = rng.integers(-2, 3, size=(labels.size, 2))
    imgs = base.reshape(-1, side, side)
    for dr in range(-2, 3):
        for dc in range(-2, 3):
            sel = (shifts[:, 0] == dr) & (shifts[:, 1] == dc)
            imgs[sel] = np.roll(imgs[sel], (dr, dc), axis=(1, 2))
    base = imgs.reshape(labels.size, -1)
    mask = base > 0
    x = base * rng.uniform(0.6, 1.0, size=base.shape) + noise * rng.standard_normal(base.shape) * mask
    # faint clutter only next to strokes, so most of the frame stays blank as in scanned digits
    near = np.zeros_like(imgs, dtype=bool)
    for dr in (-2, -1, 0, 1, 2):
        for dc in (-2, -1, 0, 1, 2):
            near |= np.roll(imgs > 0, (dr, dc), axis=(1, 2))
    x += 0.3 * np.abs(rng.standard_normal(base.shape)) * near.reshape(labels.size, -1) * (rng.random(base.shape) < 0.3)
    x = np.clip(x, 0.0, 1.0).astype(np.float32)
    order = rng.permutation(labels.size)
    return LabeledDataset(x[order], labels[order], "synthetic")


# -- partitioning ---------------------------------------------------------------

@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    labels_per_client: int
    train_per_class: int
    test_per_class: int
    seed: int = 0
    size_jitter: float = 0.0

    def validate(self, num_classes: int | None = None) -> list[str]:
        problems = []
        if self.num_clients < 1:
            problems.append("partition.num_clients must be >= 1")
        if self.labels_per_client < 1:
            problems.append("partition.labels_per_client must be >= 1")
        if num_classes is not None and self.labels_per_client > num_classes:
            problems.append(f"partition.labels_per_client ({self.labels_per_client}) exceeds class count {num_classes}")
        if self.train_per_class < 1:
            problems.append("partition.train_per_class must be >= 1")
        if self.test_per_class < 0:
            problems.append("partition.test_per_class must be >= 0")
        if not 0.0 <= self.size_jitter < 1.0:
            problems.append("partition.size_jitter must be in [0, 1)")
        return problems

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Shard:
    """Index sets into a parent dataset plus the materialized arrays."""

    train_idx: np.ndarray
    test_idx: np.ndarray
    labels: tuple
    train: Batch
    test: Batch


def assign_labels(num_clients: int, labels_per_client: int, num_classes: int, rng) -> list[tuple]:
    order = rng.permutation(num_classes)
    return [
        tuple(int(order[(k * labels_per_client + m) % num_classes]) for m in range(labels_per_client))
        for k in range(num_clients)
    ]


def partition_indices(labels: np.ndarray, spec: PartitionSpec, num_classes: int | None = None):
    """Per-client ``(label_set, train_idx, test_idx)`` drawn without replacement."""
    labels = np.asarray(labels)
    C = int(labels.max()) + 1 if num_classes is None else num_classes
    problems = spec.validate(C)
    if problems:
        raise InvalidInputError("; ".join(problems))
    rng = np.random.default_rng(spec.seed)
    label_sets = assign_labels(spec.num_clients, spec.labels_per_client, C, rng)
    if spec.size_jitter > 0:
        factors = rng.uniform(1.0 - spec.size_jitter, 1.0 + spec.size_jitter, size=spec.num_clients)
    else:
        factors = np.ones(spec.num_clients)

    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in range(C)]
    need = np.zeros(C, dtype=np.int64)
    counts = []
    for k, ls in enumerate(label_sets):
        n_train = max(1, int(round(spec.train_per_class * factors[k])))
        n_test = int(round(spec.test_per_class * factors[k]))
        counts.append((n_train, n_test))
        for c in ls:
            need[c] += n_train + n_test
    short = {c: int(need[c] - len(pools[c])) for c in range(C) if need[c] > len(pools[c])}
    if short:
        detail = ", ".join(f"class {c} short by {d}" for c, d in sorted(short.items()))
        raise CapacityError(f"partition infeasible: {detail}")

    cursor = np.zeros(C, dtype=np.int64)
    out = []
    for k, ls in enumerate(label_sets):
        n_train, n_test = counts[k]
        tr, te = [], []
        for c in ls:
            start = cursor[c]
            tr.append(pools[c][start:start + n_train])
            te.append(pools[c][start + n_train:start + n_train + n_test])
            cursor[c] += n_train + n_test
        out.append((ls, np.sort(np.concatenate(tr)), np.sort(np.concatenate(te))))
    return out


def partition_noniid(data: LabeledDataset, spec: PartitionSpec, cache_dir=None) -> list[Shard]:
    """Split ``data`` into per-client train/test shards with ``labels_per_client`` labels each."""
    parts = None
    cache = None
    if cache_dir is not None:
        cache = Path(cache_dir) / f"partition-{data.name}-{spec.digest()}-{spec.seed}.json"
        if cache.exists():
            parts = load_partition_cache(cache)
    if parts is None:
        parts = partition_indices(data.labels, spec, data.num_classes)
        if cache is not None:
            save_partition_cache(cache, parts)
    shards = []
    for ls, tr, te in parts:
        shards.append(Shard(
            tr, te, tuple(ls),
            Batch(data.features[tr], data.labels[tr]),
            Batch(data.features[te], data.labels[te]),
        ))
    return shards


def save_partition_cache(path, parts):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = [{"labels": list(ls), "train": tr.tolist(), "test": te.tolist()} for ls, tr, te in parts]
    path.write_text(json.dumps(payload))


def load_partition_cache(path):
    payload = json.loads(Path(path).read_text())
    return [
        (tuple(p["labels"]), np.asarray(p["train"], dtype=np.int64), np.asarray(p["test"], dtype=np.int64))
        for p in payload
    ]


# -- synthetic quadratic tasks ----------------------------------------------------

@dataclass
class QuadraticTaskSet:
    """Client objectives 0.5 * ||theta - a_k||^2; mu = L = 1, optimum = mean target."""

    targets: np.ndarray
    mu: float = 1.0
    L: float = 1.0

    @property
    def optimum(self) -> np.ndarray:
        return self.targets.mean(axis=0)

    @property
    def num_clients(self) -> int:
        return self.targets.shape[0]

    @property
    def dim(self) -> int:
        return self.targets.shape[1]


def synthetic_strongly_convex(d: int, n: int, h: float, seed: int = 0) -> QuadraticTaskSet:
    if d < 1 or n < 1:
        raise InvalidInputError("d and n must be >= 1")
    if h < 0:
        raise InvalidInputError("heterogeneity h must be >= 0")
    rng = np.random.default_rng(seed)
    center = rng.standard_normal(d)
    dirs = rng.standard_normal((n, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    # radius h/2 before centering keeps every ||a_k - mean|| <= h
    offsets = dirs * (0.5 * h * rng.random((n, 1)))
    offsets -= offsets.mean(axis=0)
    return QuadraticTaskSet(center + offsets)


# -- mini-batches -------------------------------------------------------------------

def minibatch(shard: Batch, batch_size: int, rng: np.random.Generator) -> Batch:
    n = len(shard)
    if n == 0:
        raise InvalidInputError("cannot sample from an empty shard")
    if batch_size > n:
        warnings.warn(f"batch size {batch_size} exceeds shard size {n}; sampling with replacement", stacklevel=2)
        idx = rng.integers(0, n, size=batch_size)
    else:
        idx = rng.choice(n, size=batch_size, replace=False)
    return Batch(shard.features[idx], shard.labels[idx])
