"""Run configuration: nested dataclasses read from key=value text or JSON."""

from __future__ import annotations

import ast
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .model import ConfigError, ModelConfig
from .train import Hyper

OUTPUT_ROOT_ENV = "SNPVIT_OUTPUT_ROOT"


@dataclass
class DataConfig:
    source: str = "synthetic"  # or "cifar100"
    path: str | None = None
    n_labels: int = 10
    samples_per_label: int = 100
    val_per_label: int = 50
    margin: float = 0.7
    seed: int = 0
    group: int = 5


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    hyper: Hyper = field(default_factory=lambda: Hyper(lr=0.05, epochs=20, batch_size=50))
    probe: Hyper = field(default_factory=lambda: Hyper(lr=0.05, epochs=20, batch_size=50))
    retrain: Hyper = field(default_factory=lambda: Hyper(lr=0.005, epochs=3, batch_size=50))
    data: DataConfig = field(default_factory=DataConfig)
    thresholds: list = field(default_factory=lambda: [0.3])
    th_ratio: float = 2.0
    seed: int = 0
    output_dir: str | None = None

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "hyper": self.hyper.to_dict(),
            "probe": self.probe.to_dict(),
            "retrain": self.retrain.to_dict(),
            "data": asdict(self.data),
            "thresholds": list(self.thresholds),
            "th_ratio": self.th_ratio,
            "seed": self.seed,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        kw = {}
        try:
            if "model" in d:
                kw["model"] = ModelConfig.from_dict(d.pop("model"))
            for k in ("hyper", "probe", "retrain"):
                if k in d:
                    kw[k] = replace(getattr(cls(), k), **d.pop(k))
            if "data" in d:
                kw["data"] = DataConfig(**d.pop("data"))
            kw.update(d)
            return cls(**kw)
        except TypeError as e:
            raise ConfigError(str(e)) from None


def _parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        low = text.lower()
        if low in ("true", "false"):
            return low == "true"
        if low in ("none", "null"):
            return None
        return text


def parse_key_values(text: str) -> dict:
    """``section.key = value`` lines (``#`` comments) into a nested dict."""
    out: dict = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = _parse_value(val)
    return out


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return RunConfig.from_dict(json.loads(text))
    return RunConfig.from_dict(parse_key_values(text))


def apply_overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    base = cfg.to_dict()
    for p in pairs:
        upd = parse_key_values(p)
        for k, v in upd.items():
            if isinstance(v, dict):
                base.setdefault(k, {}).update(v)
            else:
                base[k] = v
    return RunConfig.from_dict(base)


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
