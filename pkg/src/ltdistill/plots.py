"""Figures for the report stage, written as deterministic SVG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "ltdistill",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (5.0, 3.2),
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def confidence_bars(pre, post, path, title="Class-wise mean soft-label confidence"):
    """Grouped bars: per-class mean confidence before/after calibration."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        k = len(pre)
        x = np.arange(k)
        ax.bar(x - 0.2, pre, width=0.4, label="raw", color="#9e9e9e")
        ax.bar(x + 0.2, post, width=0.4, label="calibrated", color="#1f77b4")
        ax.axhline(np.mean(post), color="#1f77b4", lw=0.8, ls="--")
        ax.set_xticks(x)
        ax.set_xlabel("class (descending train count)")
        ax.set_ylabel("mean confidence")
        ax.set_ylim(0, 1.05)
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def tau_objective(curves: dict, path):
    """Objective vs tau; ``curves`` maps a label to (taus, values, tau_star)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, (taus, vals, star) in sorted(curves.items()):
            order = np.argsort(taus)
            line, = ax.plot(np.asarray(taus)[order], np.asarray(vals)[order], lw=1.0, label=label)
            ax.axvline(star, color=line.get_color(), lw=0.6, ls=":")
        ax.set_xlabel(r"$\tau$")
        ax.set_ylabel("std of class-wise confidence")
        ax.set_title("Calibration objective")
        ax.legend(frameon=False, ncol=2)
        return _save(fig, path)


def split_accuracy(table: dict, path):
    """``table`` maps variant -> {"head": acc, "mid": acc, "tail": acc, "overall": acc}."""
    groups = ["head", "mid", "tail", "overall"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        variants = sorted(table)
        width = 0.8 / max(len(variants), 1)
        x = np.arange(len(groups))
        for i, v in enumerate(variants):
            vals = [table[v].get(g, np.nan) for g in groups]
            ax.bar(x + (i - (len(variants) - 1) / 2) * width, vals, width=width, label=v)
        ax.set_xticks(x)
        ax.set_xticklabels(groups)
        ax.set_ylabel("median test accuracy")
        ax.set_ylim(0, 1.05)
        ax.set_title("Accuracy by split")
        ax.legend(frameon=False)
        return _save(fig, path)


def entropy_trend(series: dict, path, ylabel="varied-class soft-label entropy"):
    """``series`` maps a config id to (a values, mean entropy)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for cid, (a, ent) in sorted(series.items()):
            ax.plot(a, ent, marker="o", ms=3, lw=1.0, label=cid)
        ax.set_xlabel("images per varied class (a)")
        ax.set_ylabel(ylabel)
        ax.set_title("Soft-label entropy vs varied-class size")
        ax.legend(frameon=False)
        return _save(fig, path)
