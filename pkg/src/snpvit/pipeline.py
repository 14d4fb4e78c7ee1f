"""Run-directory orchestration shared by the CLI and the report."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import read_bundle, write_bundle
from .clustering import ClusterAnalysis, analyze, diag_sets
from .config import RunConfig
from .data import Dataset, ingest_cifar100, synth_dataset
from .model import ClassifierHead, ConfigError, Model, ModelConfig, TapPoint, build_model
from .snp import SnpSet, extract_all
from .train import Prefix, TrainReport, tap_features, train, train_probe_head

log = logging.getLogger(__name__)


class MissingPrerequisite(RuntimeError):
    def __init__(self, missing: list[str]):
        self.missing = missing
        super().__init__("missing prerequisites: " + ", ".join(missing))


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f))


def fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if np.isfinite(v) else str(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(type(o))


def load_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.source == "synthetic":
        return synth_dataset(
            d.n_labels, d.samples_per_label, cfg.model.image_shape, d.margin, d.seed, d.val_per_label, d.group
        )
    if d.source == "cifar100":
        if not d.path:
            raise ConfigError("data.path is required for cifar100")
        return ingest_cifar100(d.path)
    raise ConfigError(f"unknown data source {d.source!r}")


class Run:
    """A run directory holding config, checkpoint and analysis outputs."""

    def __init__(self, root, cfg: RunConfig | None = None):
        self.root = Path(root)
        self._cfg = cfg
        self._dataset = None
        self._model = None

    # -- config ------------------------------------------------------------

    @property
    def cfg(self) -> RunConfig:
        if self._cfg is None:
            p = self.root / "config.json"
            if not p.exists():
                raise MissingPrerequisite([str(p)])
            self._cfg = RunConfig.from_dict(json.loads(p.read_text()))
        return self._cfg

    def save_config(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        write_json(self.root / "config.json", self.cfg.to_dict())
        (self.root / "VERSION").write_text(__version__ + "\n")

    @property
    def dataset(self) -> Dataset:
        if self._dataset is None:
            self._dataset = load_dataset(self.cfg)
        return self._dataset

    # -- model -------------------------------------------------------------

    def save_model(self, model: Model, report: TrainReport | None = None) -> None:
        meta = {"config": model.cfg.to_dict()}
        tensors = dict(model.params)
        for k, v in model.masks.items():
            tensors["mask:" + k] = v.astype(bool)
        write_bundle(self.root / "model", tensors, meta)
        if report is not None:
            write_json(self.root / "model" / "train_report.json", report.to_dict())
        self._model = model

    @property
    def model(self) -> Model:
        if self._model is None:
            if not (self.root / "model").exists():
                raise MissingPrerequisite([str(self.root / "model")])
            tensors, meta = read_bundle(self.root / "model")
            m = Model(ModelConfig.from_dict(meta["config"]), {k: v for k, v in tensors.items() if not k.startswith("mask:")})
            m.masks = {k[5:]: v.astype(m.dtype) for k, v in tensors.items() if k.startswith("mask:")}
            self._model = m
        return self._model

    def train(self) -> TrainReport:
        cfg = self.cfg
        model = build_model(cfg.model, cfg.seed)
        report = train(model, self.dataset, replace(cfg.hyper, seed=cfg.seed))
        self.save_model(model, report)
        return report

    # -- probes ------------------------------------------------------------

    def probe_dir(self, tap: TapPoint) -> Path:
        return self.root / "probes" / tap.name

    def probe(self, tap: TapPoint, train_if_missing: bool = True) -> tuple[ClassifierHead, float]:
        d = self.probe_dir(tap)
        if d.exists():
            tensors, meta = read_bundle(d)
            return ClassifierHead(0, 0, params=tensors), meta["accuracy"]
        if not train_if_missing:
            raise MissingPrerequisite([str(d)])
        return self.train_probe(tap)

    def train_probe(self, tap: TapPoint) -> tuple[ClassifierHead, float]:
        tap.width(self.model.cfg)
        hyper = replace(self.cfg.probe, seed=self.cfg.seed)
        head, acc = train_probe_head(self.model, tap, self.dataset, hyper)
        write_bundle(self.probe_dir(tap), head.params, {"tap": tap.name, "accuracy": acc, "hyper": hyper.to_dict()})
        return head, acc

    def model_head_tap(self) -> TapPoint:
        return TapPoint(self.model.cfg.num_encoders, "block_out")

    # -- SNP ---------------------------------------------------------------

    def snp_dir(self, tap: TapPoint, own_head: bool = False) -> Path:
        return self.root / "snp" / (tap.name + ("@model" if own_head else ""))

    def extract(self, tap: TapPoint, threshold: float, split: str = "validation", own_head: bool = False, node_csv: bool = False) -> SnpSet:
        if own_head:
            head, acc = self.model.head(), self.model.accuracy(self.dataset[split].images, self.dataset[split].labels)
        else:
            head, acc = self.probe(tap)
        snp = extract_all(Prefix(self.model, tap), head, self.dataset, split, threshold)
        d = self.snp_dir(tap, own_head)
        write_bundle(d, {"fields": snp.fields}, {"tap": tap.name, "threshold": threshold, "split": split, "accuracy": acc, "own_head": own_head})
        if node_csv:
            for k in range(snp.num_matrices):
                np.savetxt(d / f"node_{k:04d}.csv", snp.fields[k], delimiter=",", fmt="%.17g")
        return snp

    def snp_taps(self) -> list[str]:
        base = self.root / "snp"
        return sorted(p.name for p in base.iterdir() if (p / "manifest.json").exists()) if base.exists() else []

    def load_snp(self, name: str, threshold: float | None = None) -> tuple[SnpSet, dict]:
        d = self.root / "snp" / name
        if not (d / "manifest.json").exists():
            raise MissingPrerequisite([str(d)])
        tensors, meta = read_bundle(d)
        th = meta["threshold"] if threshold is None else threshold
        tap = TapPoint.parse(meta["tap"])
        return SnpSet(tensors["fields"], th, tap, meta["split"]), meta

    def cluster(self, name: str, rule: str = "mutual", threshold: float | None = None) -> tuple[ClusterAnalysis, dict]:
        snp, meta = self.load_snp(name, threshold)
        an = analyze(snp, rule)
        d = self.root / "snp" / name
        if threshold is None:
            write_json(d / "clusters.json", {"rule": rule, "threshold": snp.threshold, "clusters": [cs.clusters for cs in an.cluster_sets]})
            write_csv(
                d / "matrix_stats.csv",
                ["node", "N_c", "diag", "mean_size", "n"],
                [(k, s.n_clusters, s.diag, s.mean_size, s.n_stray) for k, s in enumerate(an.stats)],
            )
            write_json(d / "layer_stats.json", an.layer.to_dict())
        return an, meta

    def diag_sets_for(self, tap: TapPoint, threshold: float, split: str, own_head: bool = False) -> tuple[list[set[int]], ClusterAnalysis, float]:
        name = self.snp_dir(tap, own_head).name
        try:
            snp, meta = self.load_snp(name, threshold)
            acc = meta["accuracy"]
        except MissingPrerequisite:
            snp = self.extract(tap, threshold, split, own_head)
            acc = json.loads((self.snp_dir(tap, own_head) / "manifest.json").read_text())["meta"]["accuracy"]
        an = analyze(snp)
        return diag_sets(an), an, acc

    def features(self, tap: TapPoint, split: str) -> np.ndarray:
        return tap_features(self.model, tap, self.dataset[split].images)
