"""Labelled datasets, per-user partitioning and the server's auxiliary set."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class CapacityError(ValueError):
    """Not enough samples of some class to satisfy a request."""


class IDXFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    ids: np.ndarray | None = None  # stable sample identifiers, used for disjointness checks

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be (samples, dim) with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label index out of range")
        if self.ids is None:
            object.__setattr__(self, "ids", np.arange(len(self.labels)))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def composition(self) -> np.ndarray:
        counts = self.class_counts()
        return counts / counts.sum()

    def subset(self, index: np.ndarray) -> Dataset:
        index = np.asarray(index, dtype=int)
        return Dataset(self.features[index], self.labels[index], self.class_count, self.ids[index])

    def manifest(self, seed: int | None = None, source: str = "synthetic") -> dict:
        return {"class_counts": self.class_counts().tolist(), "seed": seed, "source": source}


@dataclass(frozen=True)
class CompositionSpec:
    """Per-class sample counts for one user; a zero marks a null class."""

    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        if any(c < 0 for c in self.counts):
            raise ValueError("class counts must be nonnegative")
        if not any(self.counts):
            raise ValueError("a user needs at least one sample")

    @classmethod
    def from_proportions(cls, proportions: Sequence[float], total: int) -> CompositionSpec:
        return cls(tuple(int(c) for c in proportions_to_counts(proportions, total)))

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def proportions(self) -> np.ndarray:
        c = np.asarray(self.counts, dtype=float)
        return c / c.sum()

    @property
    def null_classes(self) -> frozenset[int]:
        return frozenset(i for i, c in enumerate(self.counts) if c == 0)


@dataclass(frozen=True)
class AuxiliarySet:
    """Server-held, class-balanced samples: ``per_class[c]`` holds class ``c``."""

    per_class: tuple[np.ndarray, ...]
    ids: tuple[np.ndarray, ...]

    @property
    def class_count(self) -> int:
        return len(self.per_class)

    @property
    def k_aux(self) -> int:
        return len(self.per_class[0])

    def samples(self, classes: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Stacked features and labels for the given classes."""
        classes = list(classes)
        x = np.concatenate([self.per_class[c] for c in classes])
        y = np.concatenate([np.full(len(self.per_class[c]), c) for c in classes])
        return x, y


def proportions_to_counts(proportions: Sequence[float], total: int) -> np.ndarray:
    """Largest-remainder rounding: counts sum to ``total`` exactly, each within 1 of its target."""
    p = np.asarray(proportions, dtype=float)
    if p.ndim != 1 or np.any(p < 0) or p.sum() <= 0:
        raise ValueError("proportions must be a nonnegative vector with positive sum")
    if total < 1:
        raise ValueError("total must be positive")
    target = p / p.sum() * total
    counts = np.floor(target).astype(int)
    short = total - counts.sum()
    # ties broken by class index for determinism
    order = sorted(range(len(p)), key=lambda i: (-(target[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def generate_synthetic(
    classes: int = 10,
    dim: int = 20,
    per_class: int = 100,
    spread: float = 4.0,
    seed: int | np.random.Generator = 0,
) -> Dataset:
    """Isotropic unit-variance Gaussian blobs; class ``c`` is centred at ``spread * e_(c mod dim)``.

    With ``spread=0`` the noise is switched off too, so every sample sits on its
    class mean (the origin).
    """
    if classes < 1 or dim < 1 or per_class < 1:
        raise ValueError("classes, dim and per_class must be positive")
    if spread < 0:
        raise ValueError("spread must be nonnegative")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    means = np.zeros((classes, dim))
    means[np.arange(classes), np.arange(classes) % dim] = spread
    noise = rng.standard_normal((len(labels), dim)) if spread > 0 else np.zeros((len(labels), dim))
    return Dataset(means[labels] + noise, labels, classes)


def reserve_auxiliary(ds: Dataset, k_aux: int, seed: int | np.random.Generator = 0) -> tuple[AuxiliarySet, Dataset]:
    """Split off ``k_aux`` samples of every class; returns the auxiliary set and the remainder."""
    if k_aux < 1:
        raise ValueError("k_aux must be positive")
    rng = np.random.default_rng(seed)
    taken = []
    feats, ids = [], []
    for c in range(ds.class_count):
        pool = np.flatnonzero(ds.labels == c)
        if len(pool) < k_aux:
            raise CapacityError(f"class {c} has {len(pool)} samples, auxiliary set needs {k_aux}")
        pick = rng.choice(pool, size=k_aux, replace=False)
        pick.sort()
        taken.append(pick)
        feats.append(ds.features[pick])
        ids.append(ds.ids[pick])
    keep = np.ones(len(ds), dtype=bool)
    keep[np.concatenate(taken)] = False
    return AuxiliarySet(tuple(feats), tuple(ids)), ds.subset(np.flatnonzero(keep))


def partition(ds: Dataset, specs: Sequence[CompositionSpec], seed: int | np.random.Generator = 0) -> list[Dataset]:
    """Give user ``i`` exactly ``specs[i].counts`` samples per class, without replacement."""
    rng = np.random.default_rng(seed)
    need = np.zeros(ds.class_count, dtype=int)
    for spec in specs:
        if len(spec.counts) != ds.class_count:
            raise ValueError(f"composition has {len(spec.counts)} entries, dataset has {ds.class_count} classes")
        need += np.asarray(spec.counts)
    have = ds.class_counts()
    for c in range(ds.class_count):
        if need[c] > have[c]:
            raise CapacityError(f"class {c}: users request {need[c]} samples but only {have[c]} are available")

    pools = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.class_count)]
    cursor = np.zeros(ds.class_count, dtype=int)
    users = []
    for spec in specs:
        parts = []
        for c, k in enumerate(spec.counts):
            parts.append(pools[c][cursor[c]:cursor[c] + k])
            cursor[c] += k
        index = np.concatenate(parts)
        users.append(ds.subset(np.sort(index)))
    return users


def _open(path: str | Path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path: str | Path, magic: int) -> tuple[tuple[int, ...], bytes]:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise IDXFormatError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IDXFormatError(f"{path}: bad magic number 0x{found:08x}, expected 0x{magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    body = raw[header:]
    expected = int(np.prod(dims))
    if len(body) < expected:
        raise IDXFormatError(f"{path}: truncated data ({len(body)} of {expected} bytes)")
    return dims, body[:expected]


def load_idx(images_path: str | Path, labels_path: str | Path, class_count: int | None = None) -> Dataset:
    """Read an MNIST-layout IDX image/label pair; pixels are scaled to [0, 1]."""
    dims, body = _read_idx(images_path, IMAGES_MAGIC)
    if len(dims) != 3:
        raise IDXFormatError("image file must have three dimensions (count, rows, cols)")
    (n_labels,), label_body = _read_idx(labels_path, LABELS_MAGIC)
    if n_labels != dims[0]:
        raise IDXFormatError(f"image count {dims[0]} does not match label count {n_labels}")
    images = np.frombuffer(body, dtype=np.uint8).reshape(dims[0], dims[1] * dims[2]).astype(float) / 255.0
    labels = np.frombuffer(label_body, dtype=np.uint8).astype(int)
    if class_count is None:
        class_count = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images, labels, class_count)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: str | Path, labels_path: str | Path) -> None:
    """Write uint8 images ``(count, rows, cols)`` and labels in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def write_manifest(path: str | Path, datasets: Sequence[Dataset], seed: int | None, source: str) -> None:
    payload = [d.manifest(seed, source) for d in datasets]
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
