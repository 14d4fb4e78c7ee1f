"""Signal, internal/external noise and SNR of a tapped layer's cluster statistics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .clustering import LayerStats, analyze, appearance_counts


class NoiselessLayer(ValueError):
    pass


def signal_of(ls: LayerStats) -> float:
    """Mean appearances of a label in the diagonal clusters: diag * N_M / N_l."""
    if ls.num_labels <= 0:
        raise ValueError("number of labels must be positive")
    return ls.diag * ls.num_matrices / ls.num_labels


def noise_internal(ls: LayerStats, signal: float) -> float:
    if ls.num_labels <= 1:
        raise ValueError("internal noise needs at least two labels")
    if ls.cluster_size < 1:
        return 0.0
    return (ls.cluster_size - 1) / (ls.num_labels - 1) * signal


def noise_external(ls: LayerStats, exact: bool = False) -> float:
    """Stray elements per matrix entry, scaled by N_M.

    The default denominator is N_l**2; ``exact`` subtracts the in-cluster area
    C_s**2 * N_c.
    """
    if ls.num_labels <= 0:
        raise ValueError("number of labels must be positive")
    denom = ls.num_labels**2
    if exact:
        denom -= ls.cluster_size**2 * ls.n_clusters
    return ls.n * ls.num_matrices / denom


@dataclass
class SnrReport:
    signal: float
    noise_i: float
    noise_e: float
    snr: float
    snr_approx: float
    snr_min: float | None
    threshold: float
    inputs: LayerStats

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inputs"] = self.inputs.to_dict()
        return d


def _ratio(num, den):
    if den > 0:
        return num / den
    return math.inf if num > 0 else math.nan


def snr(ls: LayerStats, min_appearances: float | None = None, exact: bool = False, strict: bool = True) -> SnrReport:
    """Signal over (internal + external) noise.

    With ``strict`` a layer without noise raises; otherwise its SNR is inf.
    """
    s = signal_of(ls)
    ni = noise_internal(ls, s)
    ne = noise_external(ls, exact)
    if strict and ni + ne == 0 and s > 0:
        raise NoiselessLayer("noiseless layer")
    approx = _ratio(ls.cluster_size * ls.n_clusters * ls.num_labels, ls.n)
    smin = None if min_appearances is None else _ratio(min_appearances, ni + ne)
    return SnrReport(s, ni, ne, _ratio(s, ni + ne), approx, smin, ls.threshold, ls)


def snr_min(ls: LayerStats, appearances: np.ndarray, exact: bool = False) -> float:
    """SNR with the signal replaced by the least-represented label's appearances."""
    rep = snr(ls, float(np.min(appearances)), exact)
    return rep.snr_min


@dataclass
class SweepCurve:
    thresholds: list[float]
    reports: list[SnrReport]

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.reports]


def threshold_sweep(snp_set, thresholds, rule: str = "mutual", exact: bool = False) -> SweepCurve:
    """Re-clip, re-cluster and recompute the SNR report at each threshold."""
    ths = [float(t) for t in thresholds]
    if any(b <= a for a, b in zip(ths, ths[1:])):
        raise ValueError("thresholds must be strictly increasing")
    reports = []
    for th in ths:
        an = analyze(snp_set.reclip(th), rule)
        app = appearance_counts(an.cluster_sets, an.num_labels)
        reports.append(snr(an.layer, float(app.min()), exact, strict=False))
    return SweepCurve(ths, reports)


def parse_sweep(spec: str) -> list[float]:
    """``lo:hi:step`` inclusive of ``hi`` (within half a step)."""
    lo, hi, step = (float(v) for v in spec.split(":"))
    if step <= 0 or hi < lo:
        raise ValueError(f"bad sweep {spec!r}")
    n = int(math.floor((hi - lo) / step + 0.5)) + 1
    return [round(lo + i * step, 12) for i in range(n)]


def width_diagnostic(num_matrices: int, diag: float, num_labels: int) -> str:
    """'pass' when every label can appear several times across the matrices."""
    return "pass" if num_matrices * diag >= 10 * num_labels else "warn"
