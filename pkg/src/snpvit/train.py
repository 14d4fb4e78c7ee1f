"""SGD training loop, probe heads and finite-difference gradient checks."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset
from .model import ClassifierHead, ConfigError, Model, TapPoint, label_smoothing_ce, layer_kind

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyper:
    lr: float = 0.05
    l2: float = 1e-4
    decay: float = 0.8
    decay_every: int = 10
    smoothing: float = 0.1
    momentum: float = 0.9
    batch_size: int = 100
    epochs: int = 30
    seed: int = 0
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.l2 < 0:
            raise ConfigError("L2 coefficient must be non-negative")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay factor must lie in (0, 1]")
        if self.decay_every <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ConfigError("decay interval, batch size and epochs must be positive")
        if not 0 <= self.smoothing < 1:
            raise ConfigError("label smoothing must lie in [0, 1)")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def lr_at(self, epoch: int) -> float:
        """Piecewise-constant schedule, multiplied by ``decay`` every ``decay_every`` epochs."""
        return self.lr * self.decay ** (epoch // self.decay_every)

    def to_dict(self) -> dict:
        return asdict(self)


class Optimizer:
    """SGD with Nesterov momentum and L2 (or AdamW), with optional keep-masks.

    ``groups`` maps parameter names to a Hyper overriding lr/l2 for that
    parameter; names absent from ``params`` are never touched.
    """

    def __init__(self, params: dict[str, np.ndarray], hyper: Hyper, masks=None, groups=None):
        self.params = params
        self.hyper = hyper
        self.masks = masks or {}
        self.groups = groups or {}
        self.state = {k: np.zeros_like(v) for k, v in params.items()}
        self.state2 = {k: np.zeros_like(v) for k, v in params.items()} if hyper.optimizer == "adamw" else None
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], epoch: int) -> None:
        self.t += 1
        for name, g in grads.items():
            if name not in self.params:
                continue
            w = self.params[name]
            h = self.groups.get(name, self.hyper)
            lr = h.lr_at(epoch)
            mask = self.masks.get(name)
            if mask is not None:
                g = g * mask
            if self.state2 is None:
                g = g + h.l2 * w
                buf = self.state[name]
                buf *= h.momentum
                buf += g
                w -= (lr * (g + h.momentum * buf)).astype(w.dtype)
            else:
                b1, b2 = 0.9, 0.999
                m, v = self.state[name], self.state2[name]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                mh = m / (1 - b1**self.t)
                vh = v / (1 - b2**self.t)
                w -= (lr * (mh / (np.sqrt(vh) + 1e-8) + h.l2 * w)).astype(w.dtype)
            if mask is not None:
                w *= mask


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.epochs[-1] if self.epochs else {}

    def to_dict(self) -> dict:
        return {"epochs": self.epochs}


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s : s + batch_size]


def train(
    model: Model,
    dataset: Dataset,
    hyper: Hyper,
    groups: dict[str, Hyper] | None = None,
    trainable: set[str] | None = None,
    eval_split: str = "validation",
) -> TrainReport:
    """Train ``model`` in place. Deterministic for a given model, dataset and seed."""
    tr = dataset["train"]
    va = dataset.splits.get(eval_split)
    params = model.params if trainable is None else {k: model.params[k] for k in trainable}
    for name, mask in model.masks.items():
        model.params[name] *= mask
    opt = Optimizer(params, hyper, model.masks, groups)
    rng = np.random.default_rng(hyper.seed)
    report = TrainReport()
    for epoch in range(hyper.epochs):
        tot, correct, seen = 0.0, 0, 0
        for b, idx in enumerate(_batches(len(tr), hyper.batch_size, rng)):
            x, y = tr.images[idx], tr.labels[idx]
            logits, _ = model.forward(x, train=True)
            loss, dl = label_smoothing_ce(logits, y, hyper.smoothing)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}")
            grads = model.backward(dl)
            model._caches = None
            opt.step(grads, epoch)
            tot += loss * len(idx)
            correct += int((logits.argmax(1) == y).sum())
            seen += len(idx)
        row = {
            "epoch": epoch,
            "lr": hyper.lr_at(epoch),
            "loss": tot / max(seen, 1),
            "train_acc": correct / max(seen, 1),
        }
        if va is not None and len(va):
            row["val_acc"] = model.accuracy(va.images, va.labels)
        log.debug("epoch %d %s", epoch, row)
        report.epochs.append(row)
    return report


# ---------------------------------------------------------------------------
# probe heads


def tap_features(model: Model, tap: TapPoint, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Activations of the frozen prefix at ``tap``, shape (N, T, width)."""
    out = []
    for s in range(0, len(images), batch_size):
        _, t = model.forward(images[s : s + batch_size], stop_at=tap)
        out.append(t[tap])
    if not out:
        raise ValueError("no images")
    return np.concatenate(out)


@dataclass(frozen=True)
class Prefix:
    """A frozen model cut at a tap point."""

    model: Model
    tap: TapPoint

    @property
    def width(self) -> int:
        return self.tap.width(self.model.cfg)

    def features(self, images, batch_size: int = 256) -> np.ndarray:
        return tap_features(self.model, self.tap, images, batch_size)


def head_accuracy(head: ClassifierHead, feats: np.ndarray, labels: np.ndarray) -> float:
    logits, _ = head.forward(feats)
    return float((logits.argmax(1) == labels).mean())


def fit_head(head: ClassifierHead, feats, labels, hyper: Hyper) -> TrainReport:
    opt = Optimizer(head.params, hyper)
    rng = np.random.default_rng(hyper.seed)
    report = TrainReport()
    for epoch in range(hyper.epochs):
        tot = 0.0
        for b, idx in enumerate(_batches(len(labels), hyper.batch_size, rng)):
            logits, cache = head.forward(feats[idx])
            loss, dl = label_smoothing_ce(logits, labels[idx], hyper.smoothing)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}")
            _, g = head.backward(dl, cache)
            opt.step(g, epoch)
            tot += loss * len(idx)
        report.epochs.append({"epoch": epoch, "lr": hyper.lr_at(epoch), "loss": tot / len(labels)})
    return report


def train_probe_head(
    model: Model,
    tap: TapPoint,
    dataset: Dataset,
    hyper: Hyper,
    eval_split: str = "validation",
    head: ClassifierHead | None = None,
) -> tuple[ClassifierHead, float]:
    """Attach a fresh classifier head at ``tap`` and train only the head.

    The prefix is only ever run forward, so its parameters are untouched.
    """
    width = tap.width(model.cfg)
    if head is None:
        head = ClassifierHead(width, model.cfg.num_labels, hyper.seed, model.dtype)
    elif head.width != width:
        raise ConfigError(f"head width {head.width} does not match tap width {width}")
    tr = dataset["train"]
    feats = tap_features(model, tap, tr.images)
    fit_head(head, feats, tr.labels, hyper)
    ev = dataset[eval_split]
    return head, head_accuracy(head, tap_features(model, tap, ev.images), ev.labels)


# ---------------------------------------------------------------------------
# gradient check


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-7) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check_fn(
    loss_and_grads: Callable[[], tuple[float, dict]],
    params: dict[str, np.ndarray],
    eps: float = 1e-4,
    per_kind: int = 200,
    seed: int = 0,
    kind_of: Callable[[str], str] = lambda name: name,
) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients.

    Samples up to ``per_kind`` scalar parameters from every group returned by
    ``kind_of``; groups with fewer entries are checked exhaustively.
    """
    rng = np.random.default_rng(seed)
    _, grads = loss_and_grads()
    kinds: dict[str, list[tuple[str, int]]] = {}
    for name, p in params.items():
        kinds.setdefault(kind_of(name), []).extend((name, i) for i in range(p.size))
    worst = {}
    for kind, entries in kinds.items():
        if len(entries) > per_kind:
            pick = rng.choice(len(entries), per_kind, replace=False)
            entries = [entries[i] for i in sorted(pick)]
        errs = []
        for name, i in entries:
            flat = params[name].reshape(-1)
            old = flat[i]
            flat[i] = old + eps
            lp, _ = loss_and_grads()
            flat[i] = old - eps
            lm, _ = loss_and_grads()
            flat[i] = old
            num = (lp - lm) / (2 * eps)
            errs.append(relative_error(np.array(grads[name].reshape(-1)[i]), np.array(num)))
        worst[kind] = float(np.max(errs))
    return worst


def grad_check(model: Model, x, y, eps: float = 1e-4, smoothing: float = 0.1, per_kind: int = 200, seed: int = 0) -> float:
    """Worst relative gradient error over all layer kinds (model must be float64)."""
    if model.dtype != np.float64:
        raise ConfigError("gradient check needs a float64 model")
    report = grad_check_fn(
        lambda: model.loss_and_grads(x, y, smoothing), model.params, eps, per_kind, seed, layer_kind
    )
    log.info("grad check per kind: %s", report)
    return max(report.values())
