"""SVG figures: training-loss curves and reliability diagrams.

Output is byte-stable for fixed inputs: the SVG hash salt is pinned and the
date metadata is dropped.
"""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import CalibrationReport  # noqa: E402

_RC = {"svg.hashsalt": "cdslab", "svg.fonttype": "path", "font.family": "DejaVu Sans"}


def _svg(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return buf.getvalue()


def loss_curves_svg(series: dict[str, tuple[list[float], list[float]]], ylabel: str = "train cross entropy",
                    title: str | None = None) -> bytes:
    """One line per label; ``series`` maps label -> (epochs, values)."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, (xs, ys) in series.items():
            ax.plot(xs, ys, marker="o", markersize=3, label=label, gid=f"series-{label}")
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if series:
            ax.legend()
        ax.grid(alpha=0.3)
        fig.tight_layout()
        return _svg(fig)


def reliability_svg(reports: dict[str, CalibrationReport]) -> bytes:
    """Per-bin accuracy against confidence, one panel per run label."""
    n = max(len(reports), 1)
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.4), squeeze=False)
        for ax, (label, rep) in zip(axes[0], reports.items()):
            width = rep.bin_hi - rep.bin_lo
            ax.bar(rep.bin_lo, rep.accuracy, width=width, align="edge", edgecolor="black",
                   linewidth=0.5, label="accuracy")
            gap = rep.confidence - rep.accuracy
            used = rep.counts > 0
            ax.bar(rep.bin_lo[used], gap[used], bottom=rep.accuracy[used], width=width[used], align="edge",
                   color="tab:red", alpha=0.35, label="gap")
            ax.plot([0, 1], [0, 1], "k--", linewidth=0.8)
            ax.set_xlim(0, 1)
            ax.set_ylim(0, 1)
            ax.set_xlabel("confidence")
            ax.set_title(f"{label}\nECE {rep.ece:.4f}", fontsize=9)
        axes[0][0].set_ylabel("accuracy")
        axes[0][0].legend(loc="upper left", fontsize=8)
        fig.tight_layout()
        return _svg(fig)
