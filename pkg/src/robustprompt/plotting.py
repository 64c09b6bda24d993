"""Figures rendered next to the CSV reports (the CSVs stay authoritative)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "image.cmap": "viridis",
}


def plot_slice(offsets, losses, path, title: str = "loss slice") -> None:
    """Heatmap of the loss grid: rows traditional offset, columns adaptive offset."""
    offsets = np.asarray(offsets)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 3.8))
        extent = (offsets[0], offsets[-1], offsets[0], offsets[-1])
        im = ax.imshow(np.asarray(losses), origin="lower", extent=extent, aspect="auto")
        ax.set_xlabel("adaptive direction offset")
        ax.set_ylabel("traditional direction offset")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, label="cross-entropy")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_eval(report, path, title: str = "accuracy under attack") -> None:
    names = [r.attack for r in report.rows]
    accs = [r.accuracy for r in report.rows]
    colors = ["#4c72b0" if not r.adaptive else "#c44e52" for r in report.rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.9 * len(names) + 1), 3.2))
        bars = ax.bar(names, accs, color=colors)
        for b, a in zip(bars, accs):
            ax.text(b.get_x() + b.get_width() / 2, a + 1, f"{a:.1f}", ha="center", va="bottom", fontsize=8)
        ax.set_ylim(0, 105)
        ax.set_ylabel("accuracy (%)")
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_metrics(history: list[dict], path, title: str = "prompt tuning") -> None:
    if not history:
        return
    epochs = [h["epoch"] for h in history]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.2, 3.0))
        ax1.plot(epochs, [h["clean_loss"] for h in history], marker="o", ms=3, label="clean")
        ax1.plot(epochs, [h["adv_loss"] for h in history], marker="o", ms=3, label="adversarial")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("training loss")
        ax1.legend(frameon=False)
        ax2.plot(epochs, [h["clean_acc"] for h in history], marker="o", ms=3, label="clean")
        ax2.plot(epochs, [h["robust_acc"] for h in history], marker="o", ms=3, label="adaptive PGD")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("validation accuracy (%)")
        ax2.set_ylim(0, 100)
        ax2.legend(frameon=False)
        fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
