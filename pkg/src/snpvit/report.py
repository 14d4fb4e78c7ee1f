"""Report tables (Table-1..4 layouts), figure curves as CSV, and a JSON summary."""

from __future__ import annotations

import json
import shutil
from pathlib import Path

import numpy as np

from .clustering import label_histograms
from .pipeline import MissingPrerequisite, Run, read_csv, write_csv, write_json
from .snr import parse_sweep, snr, threshold_sweep

DEFAULT_SWEEP = "0.05:0.6:0.05"

TABLE1_HEADER = ["tap", "Th", "Acc", "N_c", "C_s", "diag", "n", "N_M", "signal", "noise_I", "noise_E", "SNR", "SNR_min"]
TABLE2_HEADER = ["tap", "signal", "noise_I", "noise_E", "SNR"]


def prerequisites(run: Run) -> list[str]:
    missing = []
    if not (run.root / "config.json").exists():
        missing.append("config.json (run `snpvit train`)")
    if not (run.root / "model" / "manifest.json").exists():
        missing.append("model checkpoint (run `snpvit train`)")
    if not run.snp_taps():
        missing.append("SNP matrices (run `snpvit snp extract`)")
    return missing


def emit_report(run: Run, figures: bool = False) -> list[Path]:
    """Write everything under ``<run>/report`` and return the written paths."""
    missing = prerequisites(run)
    if missing:
        raise MissingPrerequisite(missing)
    out = run.root / "report"
    if out.exists():
        shutil.rmtree(out)
    written: list[Path] = []

    def csv(name, header, rows):
        p = out / name
        write_csv(p, header, rows)
        written.append(p)

    t1, t2, summary = [], [], {}
    ths = parse_sweep(DEFAULT_SWEEP)
    fig_jobs = []
    for name in run.snp_taps():
        an, meta = run.cluster(name)
        ls = an.layer
        app, field = label_histograms(an)
        rep = snr(ls, float(app.min()), strict=False)
        t1.append([name, ls.threshold, meta["accuracy"], ls.n_clusters, ls.cluster_size, ls.diag, ls.n, ls.num_matrices,
                   rep.signal, rep.noise_i, rep.noise_e, rep.snr, rep.snr_min])
        t2.append([name, rep.signal, rep.noise_i, rep.noise_e, rep.snr])
        summary[name] = rep.to_dict()
        csv(f"fig4a_{name}.csv", ["label", "appearances"], enumerate(app.tolist()))
        csv(f"fig4b_{name}.csv", ["output_unit", "field"], enumerate(field.tolist()))
        snp, _ = run.load_snp(name)
        sweep = threshold_sweep(snp, ths)
        csv(f"fig5_{name}_snr.csv", ["Th", "SNR"], zip(sweep.thresholds, sweep.column("snr")))
        csv(f"fig5_{name}_snr_min.csv", ["Th", "SNR_min"], zip(sweep.thresholds, sweep.column("snr_min")))
        summary[name]["sweep"] = [r.to_dict() for r in sweep.reports]
        fig_jobs.append((name, app, field, sweep, snp))
    csv("table1.csv", TABLE1_HEADER, t1)
    csv("table2.csv", TABLE2_HEADER, t2)

    prune_dir = run.root / "prune"
    t3 = []
    if prune_dir.exists():
        for d in sorted(p for p in prune_dir.iterdir() if (p / "table3.csv").exists()):
            for row in read_csv(d / "table3.csv"):
                t3.append([d.name] + list(row.values()))
            summary.setdefault("_prune", {})[d.name] = json.loads((d / "result.json").read_text())
        if t3:
            csv("table3.csv", ["run", "layer", "Th", "Acc", "N_c", "C_s", "diag", "n", "dilution"], t3)

    heads_dir = run.root / "heads"
    t4, fig7, fig9, fig10 = [], [], [], {}
    if heads_dir.exists():
        for d in sorted(p for p in heads_dir.iterdir() if p.is_dir()):
            if (d / "occupancy.csv").exists():
                for row in read_csv(d / "occupancy.csv"):
                    t4.append([d.name] + list(row.values()))
                t4_header = ["tap"] + list(row.keys())
            counts = read_csv(d / "counts.csv")
            heads = [k for k in counts[0] if k.startswith("head")]
            for h in heads:
                csv(f"fig7_{d.name}_{h}.csv", ["label", "appearances"], [[r["label"], r[h]] for r in counts])
            fig7.append((d.name, np.array([[int(r[h]) for r in counts] for h in heads])))
            acc = read_csv(d / "label_accuracy.csv")
            csv(f"fig9_{d.name}.csv", ["label", "accuracy"], [[r["label"], r["accuracy"]] for r in acc])
            csv(f"fig9_{d.name}_symmetry_broken.csv", ["label", "symmetry_broken"], [[r["label"], r["symmetry_broken"]] for r in acc])
            fig9.append((d.name, np.array([float(r["accuracy"]) for r in acc]), np.array([r["symmetry_broken"] == "1" for r in acc])))
            summary.setdefault("_heads", {})[d.name] = json.loads((d / "assignments.json").read_text())
        for p in sorted(heads_dir.glob("th_ratio_sweep_*.csv")):
            rows = read_csv(p)
            block = p.stem.replace("th_ratio_sweep_", "")
            csv(f"fig10_{block}.csv", ["th_ratio", "total"], [[r["th_ratio"], r["total"]] for r in rows])
            fig10[block] = ([float(r["th_ratio"]) for r in rows], [int(r["total"]) for r in rows])
        if t4:
            csv("table4.csv", t4_header, t4)
    base = run.root / "superclass" / "baseline.csv"
    if base.exists():
        rows = read_csv(base)
        csv("table4_baseline.csv", list(rows[0].keys()), [list(r.values()) for r in rows])

    p = out / "summary.json"
    write_json(p, summary)
    written.append(p)

    if figures:
        from . import plotting

        fd = out / "figures"
        for name, app, field, sweep, snp in fig_jobs:
            written.append(plotting.bar_with_mean(app, fd / f"fig4a_{name}.png", "label", "appearances", name))
            written.append(plotting.bar_with_mean(field, fd / f"fig4b_{name}.png", "output unit", "cluster field", name))
            written.append(plotting.curve(sweep.thresholds, sweep.column("snr"), fd / f"fig5_{name}_snr.png", "threshold", "SNR", name))
            written.append(plotting.curve(sweep.thresholds, sweep.column("snr_min"), fd / f"fig5_{name}_snr_min.png", "threshold", "SNR_min", name))
            written.append(plotting.matrix(snp.normalized[0], fd / f"fig3_{name}_node0.png", f"{name} node 0"))
        for name, counts in fig7:
            written.append(plotting.head_counts(counts, fd / f"fig7_{name}.png", name))
        for name, acc, broken in fig9:
            written.append(plotting.accuracy_split(acc, broken, fd / f"fig9_{name}.png", name))
        if fig10:
            written.append(plotting.th_ratio_curves(fig10, fd / "fig10.png"))
    return written
