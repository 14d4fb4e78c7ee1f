"""ANDC, A-ANDC and random pruning masks, retraining under masks, skip-field ratio."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .model import ConfigError, Model, TapPoint
from .train import Hyper, tap_features, train

log = logging.getLogger(__name__)

PROVENANCES = ("ANDC_classifier", "ANDC_interlayer", "A_ANDC", "random")

# default thresholds per layer kind for diag-set extraction
DEFAULT_THRESHOLDS = {"qkv": 0.35, "proj": 0.3, "ff1": 0.35, "ff2": 0.35, "classifier": 0.3}


@dataclass
class PruneMask:
    keep: np.ndarray  # (out, in) bool
    provenance: str
    thresholds: tuple[float | None, float | None] = (None, None)
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        self.keep = np.asarray(self.keep, dtype=bool)

    @property
    def kept(self) -> int:
        return int(self.keep.sum())

    @property
    def dilution(self) -> float:
        return 1.0 - self.kept / self.keep.size

    def record(self) -> dict:
        return {
            "provenance": self.provenance,
            "thresholds": list(self.thresholds),
            "seed": self.seed,
            "shape": list(self.keep.shape),
            "kept": self.kept,
            "total": int(self.keep.size),
            "dilution": self.dilution,
            **self.extra,
        }


def classifier_mask(diags: list[set[int]], num_labels: int, keep_empty: bool = False, thresholds=(None, None)) -> PruneMask:
    """Node ``a`` keeps only its weights into the output units in ``diags[a]``."""
    keep = np.zeros((num_labels, len(diags)), bool)
    for a, s in enumerate(diags):
        if s:
            keep[sorted(s), a] = True
        elif keep_empty:
            keep[:, a] = True
    return PruneMask(keep, "ANDC_classifier", thresholds)


def interlayer_mask(diags_in: list[set[int]], diags_out: list[set[int]], keep_empty: bool = False, thresholds=(None, None)) -> PruneMask:
    """Keep weight (b, a) iff input node a and output node b share a diagonal label."""
    n_lab = 1 + max([max(s) for s in (*diags_in, *diags_out) if s], default=0)
    a_ind = np.zeros((len(diags_in), n_lab), bool)
    b_ind = np.zeros((len(diags_out), n_lab), bool)
    for a, s in enumerate(diags_in):
        a_ind[a, sorted(s)] = True
    for b, s in enumerate(diags_out):
        b_ind[b, sorted(s)] = True
    keep = (b_ind.astype(np.int64) @ a_ind.T.astype(np.int64)) > 0
    if keep_empty:
        keep[:, ~a_ind.any(1)] = True
        keep[~b_ind.any(1), :] = True
    return PruneMask(keep, "ANDC_interlayer", thresholds)


def artificial_mask(n_nodes: int, num_labels: int, diag_size: int, seed: int = 0) -> tuple[list[set[int]], PruneMask]:
    """Balanced random diagonal sets: label appearance counts differ by at most one."""
    if not 1 <= diag_size <= num_labels:
        raise ValueError("diag_size must lie in [1, num_labels]")
    if n_nodes * diag_size < num_labels:
        log.warning("only %d slots for %d labels; some labels stay unassigned", n_nodes * diag_size, num_labels)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(num_labels)
    order = rng.permutation(n_nodes)
    diags: list[set[int]] = [set() for _ in range(n_nodes)]
    for slot, node in enumerate(order):
        # consecutive slots mod num_labels are distinct since diag_size <= num_labels
        idx = (slot * diag_size + np.arange(diag_size)) % num_labels
        diags[node] = set(int(v) for v in perm[idx])
    m = classifier_mask(diags, num_labels)
    m.provenance, m.seed = "A_ANDC", seed
    m.extra["diag_size"] = diag_size
    return diags, m


def random_mask(shape, dilution: float, seed: int = 0) -> PruneMask:
    """Exactly round((1 - dilution) * total) weights kept, chosen uniformly."""
    if not 0 <= dilution <= 1:
        raise ValueError("dilution must lie in [0, 1]")
    total = int(np.prod(shape))
    kept = int(round((1 - dilution) * total))
    rng = np.random.default_rng(seed)
    keep = np.zeros(total, bool)
    keep[rng.choice(total, kept, replace=False)] = True
    return PruneMask(keep.reshape(shape), "random", seed=seed)


def threshold_for_dilution(fields_fn, target: float, start: float = 0.05, stop: float = 0.95, step: float = 0.05):
    """Smallest threshold on the grid whose mask reaches ``target`` dilution.

    ``fields_fn(th)`` must return a PruneMask.
    """
    th = start
    while th <= stop + 1e-12:
        m = fields_fn(round(th, 10))
        if m.dilution >= target:
            return round(th, 10), m
        th += step
    raise ValueError(f"no threshold up to {stop} reaches dilution {target}")


def apply_and_retrain(
    model: Model,
    layer: str,
    mask: PruneMask,
    hyper: Hyper,
    dataset: Dataset,
    background: Hyper | None = None,
    eval_split: str = "validation",
) -> tuple[float, float, "object"]:
    """Prune ``layer`` in place and retrain under the mask.

    The pruned layer trains with ``hyper``; every other parameter uses
    ``background`` (default: ``hyper``).  Masked weights stay exactly zero.
    Returns (accuracy right after pruning, accuracy after retraining, report).
    """
    if layer not in model.params:
        raise ConfigError(f"unknown layer {layer!r}")
    if model.params[layer].shape != mask.keep.shape:
        raise ConfigError(f"mask shape {mask.keep.shape} does not match {layer} {model.params[layer].shape}")
    model.masks[layer] = mask.keep.astype(model.dtype)
    model.params[layer] *= model.masks[layer]
    ev = dataset[eval_split]
    before = model.accuracy(ev.images, ev.labels)
    if hyper.epochs == 0:
        return before, before, None
    bg = background or hyper
    groups = {layer: hyper}
    report = train(model, dataset, bg, groups=groups, eval_split=eval_split)
    after = model.accuracy(ev.images, ev.labels)
    return before, after, report


def skip_field_ratio(model: Model, encoder: int, images: np.ndarray) -> float:
    """Mean |skip field| over mean |projection output| at one encoder's MHA sub-block."""
    proj = tap_features(model, TapPoint(encoder, "projection_out"), images)
    total = tap_features(model, TapPoint(encoder, "projection_out", True), images)
    skip = total.astype(np.float64) - proj
    den = float(np.abs(proj).mean())
    if den == 0 or not math.isfinite(den):
        raise ValueError("degenerate ratio: projection output is identically zero")
    return float(np.abs(skip).mean()) / den
