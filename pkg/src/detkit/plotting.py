"""Figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalResult  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 110,
}


def figure_path(output_path, suffix: str = ".png") -> Path:
    """``report.json`` -> ``report.png``."""
    return Path(output_path).with_suffix(suffix)


def plot_bench(rows, path) -> Path:
    """Median wall time per method against box count, log-log."""
    by_method = defaultdict(lambda: defaultdict(list))
    for method, n, _, nanos in rows:
        by_method[method][n].append(nanos)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.8, 3.4))
        for method, per_n in sorted(by_method.items()):
            ns = sorted(per_n)
            med = [np.median(per_n[n]) / 1e6 for n in ns]
            lo = [np.min(per_n[n]) / 1e6 for n in ns]
            hi = [np.max(per_n[n]) / 1e6 for n in ns]
            ax.plot(ns, med, marker="o", label=method)
            ax.fill_between(ns, lo, hi, alpha=0.2)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("detections per image")
        ax.set_ylabel("wall time [ms]")
        ax.set_title("NMS wall time (median, min-max band)")
        ax.legend(frameon=False)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_eval(result: EvalResult, path, title: str = "") -> Path:
    """Left: mean AP per IoU threshold. Right: per-class PR curves at IoU 0.50."""
    classes = result.classes
    with plt.rc_context(_RC):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8.0, 3.4))
        if classes:
            per_t = [np.mean([result.ap[(c, t)] for c in classes]) for t in result.thresholds]
            ax0.plot(result.thresholds, per_t, marker="o", color="k")
        ax0.set_ylim(-0.02, 1.02)
        ax0.set_xlabel("IoU threshold")
        ax0.set_ylabel("AP (mean over classes)")
        ax0.set_title(f"mAP = {result.map:.4f}")
        t50 = min(result.thresholds, key=lambda t: abs(t - 0.5)) if result.thresholds else None
        for c in classes:
            rec, prec = result.pr_curves.get((c, t50), (np.zeros(0), np.zeros(0)))
            if len(rec):
                ax1.step(rec, prec, where="post", lw=0.8, alpha=0.7)
        ax1.set_xlim(0, 1.02)
        ax1.set_ylim(0, 1.02)
        ax1.set_xlabel("recall")
        ax1.set_ylabel("precision")
        ax1.set_title("PR curves at IoU 0.50, one per class")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path)
        plt.close(fig)
    return path
