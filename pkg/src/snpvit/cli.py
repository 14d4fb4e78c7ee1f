"""Command-line interface: ``snpvit <subcommand> --run-dir DIR ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import write_bundle
from .clustering import appearance_counts
from .config import RunConfig, apply_overrides, default_output_root, load_config
from .data import SuperclassMap
from .heads import (
    assign_labels,
    head_label_counts,
    occupancy_baseline,
    per_head_accuracy,
    per_label_accuracy,
    sb_accuracy_split,
    superclass_occupancy,
    th_ratio_sweep,
)
from .model import SITES, ConfigError, TapPoint
from .pipeline import MissingPrerequisite, Run, write_csv, write_json
from .pruning import (
    DEFAULT_THRESHOLDS,
    apply_and_retrain,
    artificial_mask,
    classifier_mask,
    interlayer_mask,
    random_mask,
)
from .snr import parse_sweep, snr, threshold_sweep, width_diagnostic

log = logging.getLogger("snpvit")

LAYERS = ("classifier", "qkv", "proj", "ff1", "ff2")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _run(args, create=False) -> Run:
    root = Path(args.run_dir) if args.run_dir else default_output_root() / "run"
    if create:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.set:
            cfg = apply_overrides(cfg, args.set)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        cfg.output_dir = str(root)
        run = Run(root, cfg)
        run.save_config()
        return run
    run = Run(root)
    run.cfg
    if getattr(args, "seed", None) is not None:
        run._cfg = replace(run.cfg, seed=args.seed)
    (run.root / "VERSION").write_text(__version__ + "\n")
    return run


def _tap(run: Run, encoder, site, skip=False) -> TapPoint:
    cfg = run.cfg.model
    enc = cfg.num_encoders if encoder is None else encoder
    tap = TapPoint(enc, site, skip)
    tap.width(cfg)
    return tap


# ---------------------------------------------------------------------------


def cmd_train(args):
    run = _run(args, create=True)
    rep = run.train()
    print(json.dumps({"run_dir": str(run.root), **rep.final}, sort_keys=True))


def cmd_probe_train(args):
    run = _run(args)
    tap = _tap(run, args.encoder, args.site, args.include_skip)
    _, acc = run.train_probe(tap)
    print(f"{tap.name}\taccuracy={acc:.4f}")


def cmd_snp_extract(args):
    run = _run(args)
    tap = _tap(run, args.encoder, args.site, args.include_skip)
    snp = run.extract(tap, args.threshold, args.split, own_head=args.model_head, node_csv=args.csv)
    name = run.snp_dir(tap, args.model_head).name
    an, _ = run.cluster(name)
    print(f"{name}\tN_M={snp.num_matrices}\tN_c={an.layer.n_clusters:.3f}\tdiag={an.layer.diag:.3f}\tn={an.layer.n:.3f}")


TABLE1 = ["tap", "Th", "Acc", "N_c", "C_s", "diag", "n", "N_M"]
SNR_COLS = ["signal", "noise_I", "noise_E", "SNR", "SNR_min"]


def _table1_row(name, meta, ls):
    return [name, ls.threshold, meta["accuracy"], ls.n_clusters, ls.cluster_size, ls.diag, ls.n, ls.num_matrices]


def cmd_snp_stats(args):
    run = _run(args)
    rows = []
    for name in run.snp_taps():
        an, meta = run.cluster(name, args.rule)
        rows.append(_table1_row(name, meta, an.layer))
    if not rows:
        raise MissingPrerequisite([str(run.root / "snp")])
    write_csv(run.root / "snp" / "stats.csv", TABLE1, rows)
    for r in rows:
        print("\t".join(str(v) for v in r))


def cmd_snr(args):
    run = _run(args)
    names = run.snp_taps()
    if not names:
        raise MissingPrerequisite([str(run.root / "snp")])
    rows, summary = [], {}
    ths = parse_sweep(args.sweep) if args.sweep else None
    for name in names:
        an, meta = run.cluster(name, args.rule)
        app = appearance_counts(an.cluster_sets, an.num_labels)
        rep = snr(an.layer, float(app.min()), exact=args.exact, strict=False)
        rows.append(_table1_row(name, meta, an.layer) + [rep.signal, rep.noise_i, rep.noise_e, rep.snr, rep.snr_min])
        summary[name] = rep.to_dict() | {"width_diagnostic": width_diagnostic(an.layer.num_matrices, an.layer.diag, an.layer.num_labels)}
        if ths:
            snp, _ = run.load_snp(name)
            curve = threshold_sweep(snp, ths, args.rule, args.exact)
            write_csv(run.root / "snr" / f"{name}_sweep.csv", ["Th"] + SNR_COLS,
                      [[t, r.signal, r.noise_i, r.noise_e, r.snr, r.snr_min] for t, r in zip(curve.thresholds, curve.reports)])
            print(f"{name}\tsweep points={len(ths)}")
    write_csv(run.root / "snr" / "table.csv", TABLE1 + SNR_COLS, rows)
    write_json(run.root / "snr" / "summary.json", summary)
    for r in rows:
        print("\t".join(str(v) for v in r))


# -- pruning ------------------------------------------------------------------

# layer -> (input tap site, input skip, output tap site, output skip)
INTERLAYER_TAPS = {
    "qkv": ("layernorm_out", False, "qkv_out", False),
    "proj": ("attention_out", False, "projection_out", True),
    "ff1": ("projection_out", True, "linear1_out", False),
    "ff2": ("linear1_out", False, "linear2_out", True),
}


def cmd_prune(args):
    run = _run(args)
    model = run.model.copy()
    cfg = run.cfg
    ds = run.dataset
    nl = cfg.model.num_labels
    enc = cfg.model.num_encoders if args.encoder is None else args.encoder
    if args.layer == "classifier":
        pname = "head.fc_w"
    else:
        pname = f"enc{enc}.{args.layer}.weight"
        if pname not in model.params:
            raise ConfigError(f"no layer {pname}")
    shape = model.params[pname].shape
    th = args.threshold if args.threshold is not None else DEFAULT_THRESHOLDS[args.layer]
    skip_out = not args.no_skip
    table = []

    def diags(tap, own=False):
        ds_, an, acc = run.diag_sets_for(tap, th, args.split, own)
        table.append([f"{tap.name}{'@model' if own else ''}", th, acc, an.layer.n_clusters, an.layer.cluster_size, an.layer.diag, an.layer.n])
        return ds_

    def andc_mask():
        if args.layer == "classifier":
            return classifier_mask(diags(TapPoint(cfg.model.num_encoders, "block_out"), own=True), nl, args.keep_empty, (th, None))
        si, ki, so, ko = INTERLAYER_TAPS[args.layer]
        din = diags(TapPoint(enc, si, ki))
        dout = diags(TapPoint(enc, so, ko and skip_out))
        return interlayer_mask(din, dout, args.keep_empty, (th, th))

    if args.method == "andc":
        mask = andc_mask()
        if args.dilution is not None:
            while mask.dilution < args.dilution and th < 0.95:
                th = round(th + 0.05, 10)
                table.clear()
                mask = andc_mask()
            if mask.dilution < args.dilution:
                raise ValueError(f"ANDC cannot reach dilution {args.dilution}")
    elif args.method == "a-andc":
        if args.layer != "classifier":
            raise ConfigError("a-andc is defined for the classifier layer")
        d = 0.8 if args.dilution is None else args.dilution
        size = max(1, int(round((1 - d) * nl)))
        _, mask = artificial_mask(shape[1], nl, size, cfg.seed)
    else:
        if args.dilution is None:
            raise UsageError("random pruning needs --dilution")
        mask = random_mask(shape, args.dilution, cfg.seed)

    ev = ds["validation"]
    acc0 = model.accuracy(ev.images, ev.labels)
    r = cfg.retrain
    hyper = replace(r, seed=cfg.seed, epochs=args.epochs if args.epochs is not None else r.epochs)
    bg = replace(hyper, lr=args.background_lr)
    before, after, _ = apply_and_retrain(model, pname, mask, hyper, ds, bg)
    out = run.root / "prune" / f"{args.method}_{args.layer}"
    write_bundle(out / "mask", {pname: mask.keep}, mask.record())
    write_json(out / "provenance.json", mask.record() | {"layer": pname})
    result = {"layer": pname, "method": args.method, "dilution": mask.dilution, "threshold": th,
              "acc_unpruned": acc0, "acc_pruned": before, "acc_retrained": after}
    write_json(out / "result.json", result)
    rows = [row + [mask.dilution if i == 0 else ""] for i, row in enumerate(table)]
    rows.append([f"{pname} ({args.method})", th if args.method == "andc" else "", after, "", "", "", "", mask.dilution])
    write_csv(out / "table3.csv", ["layer", "Th", "Acc", "N_c", "C_s", "diag", "n", "dilution"], rows)
    print(json.dumps(result, sort_keys=True))


# -- heads --------------------------------------------------------------------


def _superclasses(run: Run) -> SuperclassMap:
    sc = run.dataset.superclasses
    if sc is None:
        raise MissingPrerequisite(["dataset super-class labels"])
    return sc


def cmd_heads_analyze(args):
    run = _run(args)
    cfg = run.cfg.model
    H, nl = cfg.num_heads, cfg.num_labels
    encoders = args.encoder or [cfg.num_encoders]
    counts_per_block = {}
    for enc in encoders:
        tap = _tap(run, enc, "attention_out")
        run.extract(tap, args.threshold, args.split)
        an, _ = run.cluster(tap.name)
        profiles = head_label_counts(an.cluster_sets, H, nl)
        assigned = assign_labels(profiles, args.th_ratio)
        counts_per_block[enc] = np.stack([p.counts for p in profiles])
        head, acc = run.probe(tap)
        ev = run.dataset[args.eval_split]
        feats = run.features(tap, args.eval_split)
        pha = per_head_accuracy(head, feats, ev.labels, H, nl)
        full = per_label_accuracy(run.model.predict(ev.images), ev.labels, nl)
        d = run.root / "heads" / tap.name
        write_csv(d / "counts.csv", ["label"] + [f"head{h + 1}" for h in range(H)],
                  [[l] + [int(p.counts[l]) for p in profiles] for l in range(nl)])
        write_csv(d / "per_head_accuracy.csv", ["label"] + [f"head{h + 1}" for h in range(H)],
                  [[l] + [pha[h, l] for h in range(H)] for l in range(nl)])
        write_csv(d / "label_accuracy.csv", ["label", "accuracy", "symmetry_broken"],
                  [[l, full[l], int(any(l in s for s in assigned))] for l in range(nl)])
        info = {"tap": tap.name, "th_ratio": args.th_ratio, "probe_accuracy": acc,
                "assigned": [sorted(s) for s in assigned], "totals": [len(s) for s in assigned]}
        try:
            info["sb_split"] = sb_accuracy_split(full, assigned)
        except ValueError as e:
            info["sb_split"] = None
            info["sb_split_error"] = str(e)
        sc = run.dataset.superclasses
        if sc is not None:
            occ = [superclass_occupancy(s, sc) for s in assigned]
            L = sc.labels_per_class
            write_csv(d / "occupancy.csv", ["head", "total"] + [f"{k}/{L}" for k in range(1, L + 1)],
                      [[h + 1, o.total] + o.as_list() for h, o in enumerate(occ)])
        write_json(d / "assignments.json", info)
        print(f"{tap.name}\tassigned={info['totals']}\ttotal={sum(info['totals'])}")
    ratios = [round(1.1 + 0.1 * i, 10) for i in range(30)]
    sweep = th_ratio_sweep(counts_per_block, ratios)
    for enc in counts_per_block:
        write_csv(run.root / "heads" / f"th_ratio_sweep_enc{enc}.csv", ["th_ratio", "total"],
                  [[r, sweep[(enc, r)]] for r in ratios])


def cmd_heads_superclass(args):
    # explicit --num-labels wins, then the run's dataset, then the CIFAR-100 layout
    run = None
    if args.num_labels is not None:
        sc = SuperclassMap.consecutive(args.num_labels, args.group)
    elif args.run_dir:
        run = _run(args)
        sc = _superclasses(run)
    else:
        sc = SuperclassMap.consecutive(100, 5)
    ns = args.n or [n for n in (25, 20, 15, 10, 5) if n <= sc.num_labels]
    L = sc.labels_per_class
    rows = []
    modes = []
    if args.exact:
        modes.append("exact")
    if args.mc_samples:
        modes.append("mc")
    if not modes:
        modes = ["exact"]
    for mode in modes:
        for n in ns:
            t = occupancy_baseline(n, sc, mode, args.mc_samples or 0, args.seed or 0)
            rows.append([mode, n] + t.as_list())
    header = ["mode", "n_labels"] + [f"{k}/{L}" for k in range(1, L + 1)]
    out = Path(args.out) if args.out else ((run.root if run else default_output_root() / "run") / "superclass" / "baseline.csv")
    write_csv(out, header, rows)
    print("\t".join(header))
    for r in rows:
        print("\t".join([r[0], str(r[1])] + [f"{v:.4g}" for v in r[2:]]))


def cmd_report(args):
    from .report import emit_report

    run = _run(args)
    files = emit_report(run, figures=args.figures)
    for f in files:
        print(f)


def cmd_dump_attention(args):
    run = _run(args)
    cfg = run.cfg.model
    split = run.dataset[args.split]
    ids = [int(i) for i in args.images.split(",")]
    for i in ids:
        if not 0 <= i < len(split):
            raise IndexError(f"image id {i} outside split of {len(split)}")
    enc = cfg.num_encoders if args.encoder is None else args.encoder
    _tap(run, enc, "attention_out")
    maps = run.model.attention_maps(split.images[ids], enc)  # B,H,T,dh
    per_head = maps.mean(-1)
    allh = per_head.mean(1, keepdims=True)
    grid = cfg.grid
    tensors = {f"image{i}": np.concatenate([per_head[b:b + 1], allh[b:b + 1]], 1)[0].reshape(cfg.num_heads + 1, *grid).astype(np.float64)
               for b, i in enumerate(ids)}
    out = run.root / "attention" / f"enc{enc}"
    write_bundle(out, tensors, {"encoder": enc, "split": args.split, "images": ids, "maps": "heads 1..H then all-head mean"})
    print(out)


# ---------------------------------------------------------------------------


def build_parser() -> Parser:
    p = Parser(prog="snpvit", description="Single-node performance analysis of compact convolutional transformers")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    common = Parser(add_help=False)
    common.add_argument("--run-dir", help="run directory (default $SNPVIT_OUTPUT_ROOT/run)")
    common.add_argument("--seed", type=int)
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=Parser)

    s = sub.add_parser("train", parents=[common], help="build and train a model")
    s.add_argument("--config", help="key=value or JSON config file")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
    s.set_defaults(func=cmd_train)

    def tap_args(s, default_site="block_out"):
        s.add_argument("--encoder", type=int)
        s.add_argument("--site", choices=SITES, default=default_site)
        s.add_argument("--include-skip", action="store_true")

    s = sub.add_parser("probe-train", parents=[common], help="train a classifier head at a tap point")
    tap_args(s)
    s.set_defaults(func=cmd_probe_train)

    snp = sub.add_parser("snp", help="single-node field matrices").add_subparsers(dest="snp_cmd", required=True, parser_class=Parser)
    s = snp.add_parser("extract", parents=[common])
    tap_args(s)
    s.add_argument("--threshold", type=float, default=0.3)
    s.add_argument("--split", default="validation")
    s.add_argument("--model-head", action="store_true", help="use the model's own classifier instead of a probe")
    s.add_argument("--csv", action="store_true", help="also write one CSV per node")
    s.set_defaults(func=cmd_snp_extract)
    s = snp.add_parser("stats", parents=[common])
    s.add_argument("--rule", default="mutual", choices=("mutual", "or", "mutual+density"))
    s.set_defaults(func=cmd_snp_stats)

    s = sub.add_parser("snr", parents=[common], help="signal/noise statistics and threshold sweeps")
    s.add_argument("--sweep", metavar="LO:HI:STEP")
    s.add_argument("--rule", default="mutual", choices=("mutual", "or", "mutual+density"))
    s.add_argument("--exact", action="store_true", help="exact external-noise denominator")
    s.set_defaults(func=cmd_snr)

    s = sub.add_parser("prune", parents=[common], help="prune a layer and retrain")
    s.add_argument("method", choices=("andc", "a-andc", "random"))
    s.add_argument("--layer", choices=LAYERS, default="classifier")
    s.add_argument("--encoder", type=int)
    s.add_argument("--dilution", type=float)
    s.add_argument("--threshold", type=float)
    s.add_argument("--split", default="validation")
    s.add_argument("--epochs", type=int)
    s.add_argument("--background-lr", type=float, default=1e-6)
    s.add_argument("--keep-empty", action="store_true", help="leave nodes with empty diagonals unpruned")
    s.add_argument("--no-skip", action="store_true", help="compute output-side diagonals without skip fields")
    s.set_defaults(func=cmd_prune)

    heads = sub.add_parser("heads", help="attention-head specialization").add_subparsers(dest="heads_cmd", required=True, parser_class=Parser)
    s = heads.add_parser("analyze", parents=[common])
    s.add_argument("--th-ratio", type=float, default=2.0)
    s.add_argument("--encoder", type=int, action="append")
    s.add_argument("--threshold", type=float, default=0.3)
    s.add_argument("--split", default="train")
    s.add_argument("--eval-split", default="validation")
    s.set_defaults(func=cmd_heads_analyze)
    s = heads.add_parser("superclass", parents=[common])
    s.add_argument("--mc-samples", type=int, default=0)
    s.add_argument("--exact", action="store_true")
    s.add_argument("--n", type=int, action="append", help="number of labels (repeatable)")
    s.add_argument("--num-labels", type=int, help="use consecutive groups instead of the run's dataset")
    s.add_argument("--group", type=int, default=5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_heads_superclass)

    s = sub.add_parser("report", parents=[common], help="write report tables and curves")
    s.add_argument("--figures", action="store_true", help="also render PNG figures")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("dump-attention", parents=[common], help="dump per-head attention output maps")
    s.add_argument("--images", required=True, help="comma-separated image ids")
    s.add_argument("--encoder", type=int)
    s.add_argument("--split", default="validation")
    s.set_defaults(func=cmd_dump_attention)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 2
    except MissingPrerequisite as e:
        print(f"error: missing: {'; '.join(e.missing)}", file=sys.stderr)
        return 3
    except (ValueError, IndexError, RuntimeError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
