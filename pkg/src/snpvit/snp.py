"""Single-node field matrices: silence every classifier weight but one node's."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DataError, Dataset
from .model import ClassifierHead, TapPoint
from .train import Prefix


@dataclass
class FieldMatrix:
    values: np.ndarray  # (N_l, N_l): row = input label, column = output unit
    node: int
    tap: TapPoint | None = None
    split: str = "validation"


@dataclass
class ClippedMatrix:
    bits: np.ndarray
    threshold: float
    max_value: float


def normalize_and_clip(values, threshold: float) -> ClippedMatrix:
    """Divide by the signed maximum and keep entries at or above ``threshold``."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold {threshold} outside (0, 1)")
    values = np.asarray(values, dtype=np.float64)
    mx = float(values.max())
    if mx <= 0:
        return ClippedMatrix(np.zeros(values.shape, bool), threshold, mx)
    return ClippedMatrix(values / mx >= threshold, threshold, mx)


def clip_stack(fields: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised clipping of a (N_M, N_l, N_l) stack; returns (bits, normalized)."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold {threshold} outside (0, 1)")
    mx = fields.reshape(len(fields), -1).max(1)
    safe = np.where(mx > 0, mx, 1.0)[:, None, None]
    norm = fields / safe
    bits = (norm >= threshold) & (mx > 0)[:, None, None]
    return bits, norm


@dataclass
class SnpSet:
    """All field matrices of one tapped layer plus their clipped versions."""

    fields: np.ndarray  # (N_M, N_l, N_l) float64
    threshold: float
    tap: TapPoint | None = None
    split: str = "validation"
    bits: np.ndarray = field(init=False)
    normalized: np.ndarray = field(init=False)

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=np.float64)
        self.bits, self.normalized = clip_stack(self.fields, self.threshold)

    @property
    def num_matrices(self) -> int:
        return self.fields.shape[0]

    @property
    def num_labels(self) -> int:
        return self.fields.shape[1]

    def matrix(self, node: int) -> FieldMatrix:
        return FieldMatrix(self.fields[node], node, self.tap, self.split)

    def reclip(self, threshold: float) -> "SnpSet":
        return SnpSet(self.fields, threshold, self.tap, self.split)


def _label_counts(labels, num_labels):
    counts = np.bincount(labels, minlength=num_labels)
    if (counts == 0).any():
        missing = np.flatnonzero(counts == 0)
        raise DataError(f"label {int(missing[0])} has no inputs in this split")
    return counts


def pooled_features(prefix: Prefix, head: ClassifierHead, images, batch_size=256) -> np.ndarray:
    """Sequence-pooled tap activations (N, width), computed once per input."""
    out = []
    for s in range(0, len(images), batch_size):
        feats = prefix.features(images[s : s + batch_size])
        out.append(head.pool(feats)[0])
    return np.concatenate(out).astype(np.float64)


def label_means(pooled: np.ndarray, labels: np.ndarray, num_labels: int) -> np.ndarray:
    """(N_l, width): mean pooled activation of each node over each label's inputs."""
    counts = _label_counts(labels, num_labels)
    sums = np.zeros((num_labels, pooled.shape[1]))
    np.add.at(sums, labels, pooled)
    return sums / counts[:, None]


def fields_from_means(means: np.ndarray, fc_w: np.ndarray, nodes=None) -> np.ndarray:
    """Field matrices for the given nodes: element (i, j) = mean_i[node] * W[j, node]."""
    nodes = np.arange(means.shape[1]) if nodes is None else np.atleast_1d(nodes)
    w = np.asarray(fc_w, dtype=np.float64)
    return means[:, nodes].T[:, :, None] * w[:, nodes].T[:, None, :]


def single_node_fields(prefix: Prefix, head: ClassifierHead, node: int, dataset: Dataset, split="validation") -> FieldMatrix:
    s = dataset[split]
    if not len(s):
        raise DataError(f"split {split!r} is empty")
    if not 0 <= node < head.width:
        raise IndexError(f"node {node} outside tap width {head.width}")
    pooled = pooled_features(prefix, head, s.images)
    means = label_means(pooled, s.labels, dataset.num_labels)
    return FieldMatrix(fields_from_means(means, head.params["fc_w"], node)[0], node, prefix.tap, split)


def extract_all(prefix: Prefix, head: ClassifierHead, dataset: Dataset, split="validation", threshold=0.3) -> SnpSet:
    """One field matrix per tapped node from a single pass over the split."""
    s = dataset[split]
    if not len(s):
        raise DataError(f"split {split!r} is empty")
    pooled = pooled_features(prefix, head, s.images)
    means = label_means(pooled, s.labels, dataset.num_labels)
    return SnpSet(fields_from_means(means, head.params["fc_w"]), threshold, prefix.tap, split)
