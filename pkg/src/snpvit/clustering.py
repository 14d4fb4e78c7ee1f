"""Block-diagonal label clusters of clipped field matrices and their statistics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

RULES = ("mutual", "or", "mutual+density")
DENSITY_MIN = 0.5


@dataclass
class ClusterSet:
    clusters: list[list[int]]
    n_stray: int
    rule: str = "mutual"

    def membership(self, num_labels: int) -> np.ndarray:
        """Cluster id per label, -1 for labels outside every cluster."""
        ids = np.full(num_labels, -1)
        for c, members in enumerate(self.clusters):
            ids[members] = c
        return ids


def _components(adj: np.ndarray) -> list[np.ndarray]:
    n, lab = connected_components(csr_matrix(adj), directed=False)
    return [np.flatnonzero(lab == c) for c in range(n)]


def find_clusters(bits, rule: str = "mutual") -> ClusterSet:
    """Group labels into diagonal clusters.

    ``mutual``: labels i != j are linked when both (i, j) and (j, i) are set;
    linked components of two or more labels are clusters, and an unlinked
    label with its diagonal bit set forms a singleton.  ``or`` links on
    either direction.  ``mutual+density`` drops mutual components whose
    block is less than half filled (their members fall back to singletons).
    Set bits joining labels of different clusters, or touching an unclustered
    label, are strays.
    """
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}")
    b = np.asarray(bits, dtype=bool)
    n = b.shape[0]
    if b.shape != (n, n):
        raise ValueError("clipped matrix must be square")
    adj = (b & b.T) if rule != "or" else (b | b.T)
    adj = adj & ~np.eye(n, dtype=bool)
    diag = np.diag(b)
    clusters: list[list[int]] = []
    clustered = np.zeros(n, bool)
    for comp in _components(adj):
        if len(comp) < 2:
            continue
        if rule == "mutual+density" and b[np.ix_(comp, comp)].mean() < DENSITY_MIN:
            continue
        clusters.append(comp.tolist())
        clustered[comp] = True
    for i in np.flatnonzero(diag & ~clustered):
        clusters.append([int(i)])
    clusters.sort(key=lambda c: c[0])
    cs = ClusterSet(clusters, 0, rule)
    ids = cs.membership(n)
    same = (ids[:, None] == ids[None, :]) & (ids[:, None] >= 0)
    cs.n_stray = int((b & ~same).sum())
    return cs


@dataclass
class MatrixStats:
    n_clusters: int
    diag: int
    mean_size: float
    n_stray: int


def matrix_stats(bits, cs: ClusterSet) -> MatrixStats:
    sizes = [len(c) for c in cs.clusters]
    diag = int(sum(sizes))
    nc = len(sizes)
    return MatrixStats(nc, diag, diag / nc if nc else 0.0, cs.n_stray)


@dataclass
class LayerStats:
    n_clusters: float
    cluster_size: float
    diag: float
    n: float
    num_matrices: int
    num_labels: int
    threshold: float
    spread: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LayerStats":
        return cls(**d)


def aggregate(stats: list[MatrixStats], num_labels: int, threshold: float) -> LayerStats:
    """Arithmetic means over matrices (empty matrices count with size 0)."""
    if not stats:
        raise ValueError("no matrices to aggregate")
    arr = np.array([(s.n_clusters, s.mean_size, s.diag, s.n_stray) for s in stats], dtype=np.float64)
    mean = arr.mean(0)
    names = ("n_clusters", "cluster_size", "diag", "n")
    spread = {k: [float(arr[:, i].min()), float(arr[:, i].max())] for i, k in enumerate(names)}
    return LayerStats(*(float(v) for v in mean), len(stats), num_labels, float(threshold), spread)


@dataclass
class ClusterAnalysis:
    """Clusters and stats for every matrix of an SnpSet at one threshold."""

    cluster_sets: list[ClusterSet]
    stats: list[MatrixStats]
    layer: LayerStats
    bits: np.ndarray
    normalized: np.ndarray

    @property
    def num_labels(self) -> int:
        return self.bits.shape[1]


def analyze(snp_set, rule: str = "mutual") -> ClusterAnalysis:
    sets = [find_clusters(b, rule) for b in snp_set.bits]
    stats = [matrix_stats(b, c) for b, c in zip(snp_set.bits, sets)]
    layer = aggregate(stats, snp_set.num_labels, snp_set.threshold)
    return ClusterAnalysis(sets, stats, layer, snp_set.bits, snp_set.normalized)


def appearance_counts(cluster_sets: list[ClusterSet], num_labels: int) -> np.ndarray:
    """Number of (matrix, cluster) pairs containing each label."""
    counts = np.zeros(num_labels, dtype=np.int64)
    for cs in cluster_sets:
        for c in cs.clusters:
            counts[c] += 1
    return counts


def label_histograms(analysis: ClusterAnalysis) -> tuple[np.ndarray, np.ndarray]:
    """(appearances per label, summed in-cluster normalized field per output unit)."""
    n = analysis.num_labels
    appearances = appearance_counts(analysis.cluster_sets, n)
    field = np.zeros(n)
    for cs, norm in zip(analysis.cluster_sets, analysis.normalized):
        for c in cs.clusters:
            field[c] += norm[np.ix_(c, c)].sum(0)
    return appearances, field


def diag_sets(analysis: ClusterAnalysis) -> list[set[int]]:
    """Per node, the labels lying in any of its diagonal clusters."""
    return [set(i for c in cs.clusters for i in c) for cs in analysis.cluster_sets]
