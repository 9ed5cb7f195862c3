"""Figures for training traces and ablation tables. Files only, no display."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {"figure.figsize": (5.0, 3.4), "font.size": 9, "axes.grid": True,
         "grid.alpha": 0.3, "axes.spines.top": False, "axes.spines.right": False}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def loss_curve(trace: list[dict], path) -> None:
    """Per-step loss with a per-epoch (or per-50-round) running mean."""
    if not trace:
        raise ValueError("empty trace")
    key = "L_AL" if trace[0]["stage"] == "atcg" else "total"
    y = np.array([r[key] for r in trace], dtype=float)
    x = np.arange(y.size)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(x, y, lw=0.6, color="0.65", label=key)
        w = max(1, min(50, y.size // 10))
        if w > 1:
            smooth = np.convolve(y, np.ones(w) / w, mode="valid")
            ax.plot(x[w - 1:], smooth, lw=1.5, color="tab:blue", label=f"mean of {w}")
        ax.set_xlabel("round" if key == "L_AL" else "step")
        ax.set_ylabel("loss")
        ax.set_title("stage 1 (analogical)" if key == "L_AL" else "stage 2 (GCD)")
        ax.legend(frameon=False)
        _save(fig, path)


def ablation(summary: list[dict], axis: str, path) -> None:
    """All/Old/New means with one-standard-deviation bars per setting."""
    labels = [r["setting"] for r in summary]
    x = np.arange(len(labels))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for metric, marker in (("all", "o"), ("old", "s"), ("new", "^")):
            m = np.array([r[f"{metric}_mean"] for r in summary])
            s = np.array([r[f"{metric}_std"] for r in summary])
            ax.errorbar(x, m, yerr=s, marker=marker, ms=4, capsize=2, lw=1.2, label=metric.capitalize())
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=0 if len(labels) < 8 else 45)
        ax.set_xlabel({"layers": "stacked layers", "alpha": "alpha", "components": "generator"}[axis])
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False, ncol=3)
        _save(fig, path)


def report_bars(report, path) -> None:
    """All/Old/New accuracy of one evaluation, with sample counts under the bars."""
    names = ["All", "Old", "New"]
    vals = [report.all_acc, report.old_acc, report.new_acc]
    counts = [report.n_old + report.n_new, report.n_old, report.n_new]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        bars = ax.bar(names, vals, color=["0.45", "tab:blue", "tab:orange"], width=0.6)
        for b, v, n in zip(bars, vals, counts):
            ax.text(b.get_x() + b.get_width() / 2, v + 0.02, f"{v:.3f}\n(n={n})", ha="center", va="bottom")
        ax.set_ylim(0, 1.15)
        ax.set_ylabel("accuracy")
        alpha = report.config.get("alpha")
        ax.set_title(f"{report.host} host" + (f", alpha={alpha}" if alpha is not None else ""))
        _save(fig, path)
