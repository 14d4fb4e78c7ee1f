"""Datasets: CIFAR-100 binary ingestion, seeded synthetic images, preprocessing."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CIFAR100_RECORD = 1 + 1 + 3072
CIFAR100_FINE = 100
CIFAR100_COARSE = 20


class DataError(ValueError):
    pass


@dataclass
class SuperclassMap:
    """Fine label -> super-class id, with every super-class holding ``L`` labels."""

    coarse_of: np.ndarray

    def __post_init__(self):
        self.coarse_of = np.asarray(self.coarse_of, dtype=np.int64)
        counts = np.bincount(self.coarse_of)
        if counts.size == 0 or (counts != counts[0]).any():
            raise DataError("every super-class must contain the same number of labels")

    @property
    def num_classes(self) -> int:
        return int(self.coarse_of.max()) + 1

    @property
    def labels_per_class(self) -> int:
        return len(self.coarse_of) // self.num_classes

    @property
    def num_labels(self) -> int:
        return len(self.coarse_of)

    @classmethod
    def consecutive(cls, num_labels: int, group: int) -> "SuperclassMap":
        if num_labels % group:
            raise DataError(f"{num_labels} labels do not split into groups of {group}")
        return cls(np.arange(num_labels) // group)

    @classmethod
    def from_pairs(cls, fine: np.ndarray, coarse: np.ndarray) -> "SuperclassMap":
        fine = np.asarray(fine)
        coarse = np.asarray(coarse)
        n = int(fine.max()) + 1
        out = np.full(n, -1)
        for f, c in zip(fine, coarse):
            if out[f] not in (-1, c):
                raise DataError(f"label {f} appears under super-classes {out[f]} and {c}")
            out[f] = c
        if (out < 0).any():
            raise DataError(f"labels {np.flatnonzero(out < 0).tolist()} never observed")
        return cls(out)


@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray
    coarse: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)


@dataclass
class Dataset:
    splits: dict[str, Split]
    num_labels: int
    superclasses: SuperclassMap | None = None
    standardized: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, s in self.splits.items():
            if len(s.labels) and (s.labels.min() < 0 or s.labels.max() >= self.num_labels):
                raise DataError(f"split {name!r} has labels outside [0, {self.num_labels})")

    def __getitem__(self, name: str) -> Split:
        try:
            return self.splits[name]
        except KeyError:
            raise DataError(f"dataset has no {name!r} split (has {sorted(self.splits)})") from None

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(next(iter(self.splits.values())).images.shape[1:])


def standardize(images: np.ndarray) -> np.ndarray:
    """Per-image zero mean / unit std; constant images are only centred."""
    x = np.asarray(images, dtype=np.float64)
    axes = tuple(range(1, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    sd = x.std(axis=axes, keepdims=True)
    sd[sd == 0] = 1.0
    return (x - mu) / sd


def read_cifar100_file(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not Path(path).is_file():
        raise DataError(f"{path}: no such file")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR100_RECORD:
        raise DataError(f"{path}: size {raw.size} is not a multiple of {CIFAR100_RECORD}")
    rec = raw.reshape(-1, CIFAR100_RECORD)
    coarse, fine = rec[:, 0].astype(np.int64), rec[:, 1].astype(np.int64)
    if (fine >= CIFAR100_FINE).any():
        i = int(np.argmax(fine >= CIFAR100_FINE))
        raise DataError(f"{path}: record {i} has fine label {fine[i]}")
    if (coarse >= CIFAR100_COARSE).any():
        i = int(np.argmax(coarse >= CIFAR100_COARSE))
        raise DataError(f"{path}: record {i} has coarse label {coarse[i]}")
    images = rec[:, 2:].reshape(-1, 3, 32, 32)
    return images, fine, coarse


def ingest_cifar100(path, dtype=np.float32) -> Dataset:
    """Load ``train.bin``/``test.bin`` from a directory, or a single ``.bin`` file.

    The official test set doubles as the validation split.
    """
    path = Path(path)
    if path.is_dir():
        files = {"train": path / "train.bin", "validation": path / "test.bin"}
        files = {k: v for k, v in files.items() if v.exists()}
        if not files:
            raise DataError(f"{path}: no train.bin or test.bin")
    else:
        files = {"train": path}
    splits = {}
    fines, coarses = [], []
    for name, f in files.items():
        img, fine, coarse = read_cifar100_file(f)
        x = standardize(img.astype(np.float64) / 255.0).astype(dtype)
        splits[name] = Split(x, fine, coarse)
        fines.append(fine)
        coarses.append(coarse)
    sc = SuperclassMap.from_pairs(np.concatenate(fines), np.concatenate(coarses)) if len(np.unique(np.concatenate(fines))) == CIFAR100_FINE else None
    return Dataset(splits, CIFAR100_FINE, sc, True, {"source": "cifar100", "path": str(path), "validation": "official test set"})


def write_cifar100_file(path, images: np.ndarray, fine, coarse) -> None:
    """Write records in the CIFAR-100 binary layout (used by fixtures)."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(fine), -1)
    rec = np.concatenate(
        [np.asarray(coarse, np.uint8)[:, None], np.asarray(fine, np.uint8)[:, None], images], axis=1
    )
    rec.tofile(path)


def synth_dataset(
    n_labels: int = 10,
    samples_per_label: int = 100,
    image_shape=(3, 8, 8),
    margin: float = 1.0,
    seed: int = 0,
    val_per_label: int | None = None,
    group: int | None = None,
    dtype=np.float32,
) -> Dataset:
    """Label-conditioned Gaussian blobs on pixel noise.

    Every label gets a smooth bump at its own location with its own channel
    colouring; a sample is ``margin * template + N(0, 1)`` noise, then
    per-image standardized.  ``margin=0`` makes all labels identically
    distributed.
    """
    if margin < 0:
        raise DataError("margin must be non-negative")
    rng = np.random.default_rng(seed)
    C, H, W = image_shape
    yy, xx = np.mgrid[0:H, 0:W]
    sigma = max(H, W) / 4.0
    templates = np.empty((n_labels, C, H, W))
    for lab in range(n_labels):
        cy, cx = rng.uniform(0, H - 1), rng.uniform(0, W - 1)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        colour = rng.normal(size=C)
        t = colour[:, None, None] * bump + 0.5 * rng.normal(size=(C, H, W))
        templates[lab] = t / np.linalg.norm(t) * np.sqrt(t.size)
    val_per_label = samples_per_label // 2 if val_per_label is None else val_per_label

    def draw(per_label):
        y = np.repeat(np.arange(n_labels), per_label)
        rng.shuffle(y)
        x = margin * templates[y] + rng.normal(size=(len(y), C, H, W))
        return standardize(x).astype(dtype), y

    splits = {}
    for name, k in (("train", samples_per_label), ("validation", val_per_label), ("test", val_per_label)):
        x, y = draw(k)
        splits[name] = Split(x, y)
    group = group or (5 if n_labels % 5 == 0 else 1)
    sc = SuperclassMap.consecutive(n_labels, group)
    for s in splits.values():
        s.coarse = sc.coarse_of[s.labels]
    meta = {"source": "synthetic", "margin": margin, "seed": seed}
    return Dataset(splits, n_labels, sc, True, meta)


def dataset_to_arrays(ds: Dataset) -> dict[str, np.ndarray]:
    out = {}
    for name, s in ds.splits.items():
        out[f"{name}.images"] = s.images
        out[f"{name}.labels"] = s.labels.astype(np.uint8)
        if s.coarse is not None:
            out[f"{name}.coarse"] = s.coarse.astype(np.uint8)
    if ds.superclasses is not None:
        out["superclasses"] = ds.superclasses.coarse_of.astype(np.uint8)
    return out


def dataset_from_arrays(arrays: dict[str, np.ndarray], num_labels: int, meta=None) -> Dataset:
    names = sorted({k.split(".")[0] for k in arrays if "." in k})
    splits = {}
    for n in names:
        coarse = arrays.get(f"{n}.coarse")
        splits[n] = Split(
            arrays[f"{n}.images"],
            arrays[f"{n}.labels"].astype(np.int64),
            None if coarse is None else coarse.astype(np.int64),
        )
    sc = SuperclassMap(arrays["superclasses"]) if "superclasses" in arrays else None
    return Dataset(splits, num_labels, sc, True, dict(meta or {}))


def default_data_root() -> Path:
    return Path(os.environ.get("SNPVIT_DATA", "data"))
