"""Figures written next to an evaluation report."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from roadnet.evaluate import ConfusionMatrix2x2, EvalReport, round2, round4  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    # keeps PNG bytes stable between runs
    "svg.hashsalt": "roadnet",
}


def _matrix_axes(ax, m: ConfusionMatrix2x2, title: str) -> None:
    rows = m.as_rows()
    ax.imshow(rows, cmap="Blues", vmin=0, vmax=max(max(r) for r in rows) or 1)
    ax.set_xticks([0, 1], labels=list(m.col_labels))
    ax.set_yticks([0, 1], labels=list(m.row_labels))
    ax.set_xlabel("prediction")
    ax.set_ylabel("ground truth")
    for i in range(2):
        for j in range(2):
            ax.text(j, i, str(rows[i][j]), ha="center", va="center")
    acc = f"accuracy {round2(m.accuracy)} ({round4(m.accuracy)})" if m.total else "no pairs"
    ax.set_title(f"{title}\n{acc}")


def plot_confusion(m: ConfusionMatrix2x2, title: str, path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 3.4))
        _matrix_axes(ax, m, title)
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return Path(path)


def plot_chamfer_histogram(report: EvalReport, path) -> Path:
    chamfers = [p.chamfer for p in report.geometry.matches]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        if chamfers:
            ax.hist(chamfers, bins=30, color="0.4")
            ax.axvline(report.geometry.mean_chamfer, color="C3", lw=1, label="mean")
            ax.legend(frameon=False)
        else:
            ax.text(0.5, 0.5, "no matched roads", ha="center", va="center",
                    transform=ax.transAxes)
        ax.set_xlabel("chamfer distance (px)")
        ax.set_ylabel("matched roads")
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return Path(path)


def write_figures(report: EvalReport, report_path) -> list[Path]:
    """Render presence, count and chamfer figures beside ``report_path``."""
    base = Path(report_path)
    stem = base.with_suffix("")
    out = [
        plot_confusion(report.presence, "Road presence", f"{stem}_presence.png"),
        plot_confusion(report.count, f"Road count ({report.count_inclusion_rule})",
                       f"{stem}_count.png"),
        plot_chamfer_histogram(report, f"{stem}_chamfer.png"),
    ]
    return out
