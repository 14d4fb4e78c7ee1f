"""Figure rendering for the report (matplotlib, Agg backend, PNG)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}
HEAD_COLORS = ["tab:blue", "tab:orange", "tab:green", "tab:red", "tab:purple", "tab:brown", "tab:pink", "tab:gray"]


def _figure(width=5.0, ratio=0.618):
    fig, ax = plt.subplots(figsize=(width, width * ratio))
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps re-rendered files byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def bar_with_mean(values, path, xlabel, ylabel, title=""):
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        x = np.arange(len(values))
        ax.bar(x, values, width=0.8, color="tab:blue")
        ax.axhline(float(np.mean(values)), color="red", ls="--", lw=1)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def curve(x, y, path, xlabel, ylabel, title=""):
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        y = np.asarray(y, dtype=float)
        ax.plot(x, np.where(np.isfinite(y), y, np.nan), "o-", ms=3)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def head_counts(counts: np.ndarray, path, title=""):
    """Stacked per-head label appearance counts (heads x labels)."""
    with plt.rc_context(STYLE):
        H, n = counts.shape
        fig, axes = plt.subplots(H, 1, figsize=(6, 1.2 * H + 0.6), sharex=True)
        axes = np.atleast_1d(axes)
        for h, ax in enumerate(axes):
            ax.bar(np.arange(n), counts[h], color=HEAD_COLORS[h % len(HEAD_COLORS)])
            ax.set_ylabel(f"head {h + 1}")
        axes[-1].set_xlabel("label")
        if title:
            axes[0].set_title(title)
        return _save(fig, path)


def accuracy_split(acc: np.ndarray, broken: np.ndarray, path, title=""):
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        x = np.arange(len(acc))
        for mask, color, name in ((broken, "tab:blue", "symmetry broken"), (~broken, "tab:orange", "rest")):
            if mask.any():
                ax.scatter(x[mask], acc[mask], s=8, color=color, label=name)
                ax.axhline(float(np.nanmean(acc[mask])), color=color, ls="--", lw=1)
        ax.set_xlabel("label")
        ax.set_ylabel("accuracy")
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def th_ratio_curves(curves: dict, path):
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        for name, (r, tot) in sorted(curves.items()):
            ax.plot(r, tot, "o-", ms=3, label=str(name))
        ax.set_xlabel("Th_Ratio")
        ax.set_ylabel("labels with symmetry breaking")
        ax.legend(frameon=False)
        return _save(fig, path)


def matrix(values: np.ndarray, path, title=""):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3.2))
        ax.imshow(values, cmap="viridis", interpolation="nearest")
        ax.set_xlabel("output unit")
        ax.set_ylabel("input label")
        if title:
            ax.set_title(title)
        return _save(fig, path)
