"""Label specialization of attention heads and super-class occupancy baselines."""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .clustering import ClusterSet, appearance_counts
from .data import SuperclassMap
from .model import ClassifierHead


@dataclass
class HeadProfile:
    head: int  # 1-based
    nodes: range
    counts: np.ndarray
    assigned: frozenset[int] = frozenset()


def head_label_counts(cluster_sets: list[ClusterSet], num_heads: int, num_labels: int) -> list[HeadProfile]:
    """Per-head label appearance counts over contiguous equal slices of matrices."""
    n = len(cluster_sets)
    if n % num_heads:
        raise ValueError(f"{n} matrices do not split evenly over {num_heads} heads")
    per = n // num_heads
    out = []
    for h in range(num_heads):
        nodes = range(h * per, (h + 1) * per)
        out.append(HeadProfile(h + 1, nodes, appearance_counts(cluster_sets[nodes.start : nodes.stop], num_labels)))
    return out


def assign_matrix(counts: np.ndarray, th_ratio: float) -> np.ndarray:
    """Boolean (H, N_l): head h owns label l when its count is positive and at
    least ``th_ratio`` times every other head's count (ties at the ratio count)."""
    if th_ratio <= 1:
        raise ValueError("th_ratio must exceed 1")
    c = np.asarray(counts, dtype=np.float64)
    H = c.shape[0]
    if H == 1:
        return c > 0
    out = np.zeros(c.shape, bool)
    for h in range(H):
        others = np.delete(c, h, axis=0).max(0)
        out[h] = (c[h] > 0) & (c[h] >= th_ratio * others)
    return out


def assign_labels(profiles: list[HeadProfile], th_ratio: float) -> list[set[int]]:
    counts = np.stack([p.counts for p in profiles])
    a = assign_matrix(counts, th_ratio)
    for p, row in zip(profiles, a):
        p.assigned = frozenset(np.flatnonzero(row).tolist())
    return [set(np.flatnonzero(row).tolist()) for row in a]


def th_ratio_sweep(counts_per_block: dict, ratios) -> dict:
    """Total assigned labels for each (block, ratio)."""
    ratios = [float(r) for r in ratios]
    if any(r <= 1 for r in ratios) or any(b <= a for a, b in zip(ratios, ratios[1:])):
        raise ValueError("ratios must exceed 1 and increase")
    return {
        (block, r): int(assign_matrix(np.asarray(c), r).sum())
        for block, c in counts_per_block.items()
        for r in ratios
    }


def per_head_accuracy(head: ClassifierHead, feats: np.ndarray, labels: np.ndarray, num_heads: int, num_labels: int) -> np.ndarray:
    """(H, N_l) per-label accuracy when only head h's slice of pooled units feeds the FC."""
    pooled, _ = head.pool(feats)
    width = pooled.shape[1]
    if width % num_heads:
        raise ValueError("tap width not divisible by the head count")
    per = width // num_heads
    w, b = head.params["fc_w"], head.params["fc_b"]
    out = np.zeros((num_heads, num_labels))
    counts = np.bincount(labels, minlength=num_labels)
    for h in range(num_heads):
        sl = slice(h * per, (h + 1) * per)
        pred = (pooled[:, sl] @ w[:, sl].T + b).argmax(1)
        hit = np.bincount(labels[pred == labels], minlength=num_labels)
        out[h] = np.divide(hit, counts, out=np.full(num_labels, np.nan), where=counts > 0)
    return out


def per_label_accuracy(pred: np.ndarray, labels: np.ndarray, num_labels: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=num_labels)
    hit = np.bincount(labels[pred == labels], minlength=num_labels)
    return np.divide(hit, counts, out=np.full(num_labels, np.nan), where=counts > 0)


def sb_accuracy_split(per_label_acc: np.ndarray, assigned) -> tuple[float, float]:
    """Mean accuracy of symmetry-broken labels vs. the rest.

    ``assigned`` is a label collection or a per-head list of label sets.
    """
    acc = np.asarray(per_label_acc, dtype=np.float64)
    assigned = list(assigned)
    if assigned and isinstance(assigned[0], (set, frozenset)):
        assigned = set().union(*assigned)
    sb = np.zeros(len(acc), bool)
    sb[sorted(assigned)] = True
    if not sb.any():
        raise ValueError("no symmetry-broken labels")
    if sb.all():
        raise ValueError("no labels outside the symmetry-broken set")
    return float(np.nanmean(acc[sb])), float(np.nanmean(acc[~sb]))


def intersect_assignments(a: list[set[int]], b: list[set[int]]) -> set[int]:
    """Labels symmetry-broken in both blocks (head identity ignored)."""
    return set().union(*a) & set().union(*b)


# ---------------------------------------------------------------------------
# super-class occupancy


@dataclass
class OccupancyTable:
    values: np.ndarray  # index k-1 for filling level k = 1..L
    total: int

    def as_list(self) -> list[float]:
        return self.values.tolist()


def superclass_occupancy(labels, sc: SuperclassMap) -> OccupancyTable:
    """count[k-1] = number of super-classes holding exactly k of ``labels``."""
    labels = np.asarray(sorted(set(int(l) for l in labels)), dtype=np.int64)
    L = sc.labels_per_class
    per = np.bincount(sc.coarse_of[labels], minlength=sc.num_classes) if len(labels) else np.zeros(sc.num_classes, int)
    return OccupancyTable(np.bincount(per, minlength=L + 1)[1 : L + 1].astype(np.int64), len(labels))


def occupancy_exact(n_labels: int, sc: SuperclassMap) -> OccupancyTable:
    """Expected occupancy for ``n_labels`` drawn without replacement (hypergeometric)."""
    N, S, L = sc.num_labels, sc.num_classes, sc.labels_per_class
    if not 0 <= n_labels <= N:
        raise ValueError("n_labels outside [0, N_l]")
    tot = comb(N, n_labels)
    vals = [S * comb(L, k) * comb(N - L, n_labels - k) / tot if k <= n_labels else 0.0 for k in range(1, L + 1)]
    return OccupancyTable(np.array(vals), n_labels)


def occupancy_mc(n_labels: int, sc: SuperclassMap, samples: int = 50_000, seed: int = 0, chunk: int = 10_000) -> OccupancyTable:
    """Monte-Carlo mean occupancy of uniformly drawn label subsets."""
    N, S, L = sc.num_labels, sc.num_classes, sc.labels_per_class
    if not 0 <= n_labels <= N:
        raise ValueError("n_labels outside [0, N_l]")
    rng = np.random.default_rng(seed)
    acc = np.zeros(L + 1)
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        picks = np.argsort(rng.random((m, N)), axis=1)[:, :n_labels]
        cls = sc.coarse_of[picks]
        flat = (np.arange(m)[:, None] * S + cls).ravel()
        per = np.bincount(flat, minlength=m * S)
        acc += np.bincount(per, minlength=L + 1)[: L + 1]
        done += m
    return OccupancyTable(acc[1:] / samples, n_labels)


def occupancy_baseline(n_labels: int, sc: SuperclassMap, mode: str = "exact", samples: int = 50_000, seed: int = 0) -> OccupancyTable:
    if mode == "exact":
        return occupancy_exact(n_labels, sc)
    if mode == "mc":
        return occupancy_mc(n_labels, sc, samples, seed)
    raise ValueError(f"unknown mode {mode!r}")
