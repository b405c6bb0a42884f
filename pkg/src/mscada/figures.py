"""Report figures rendered next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def save_training_curves(csv_rows: list[str], path) -> Path:
    """Loss components and target metrics against iteration, from the
    metrics.csv rows (header included)."""
    rows = [r.split(",") for r in csv_rows[1:] if r.strip()]
    if not rows:
        return Path(path)
    data = np.array([[float(v) for v in r] for r in rows])
    iters = data[:, 0]
    fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(9, 3.5))
    for col, label in ((1, "supervised"), (2, "mixing"), (3, "transfer")):
        ax_loss.plot(iters, data[:, col], label=label, linewidth=1.2)
    ax_loss.set_xlabel("iteration")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=8)
    ax_metric.plot(iters, data[:, 4], label="mIoU", linewidth=1.2)
    ax_metric.plot(iters, data[:, 5], label="mF1", linewidth=1.2)
    ax_metric.set_xlabel("iteration")
    ax_metric.set_ylim(0, 1)
    ax_metric.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return Path(path)


def save_report_figures(report, out_dir, prefix: str = "eval") -> list[Path]:
    """Per-class IoU bars and the confusion matrix for one evaluation."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = list(report.class_names) or [f"class{i}" for i in range(len(report.per_class_iou))]
    paths = []

    fig, ax = plt.subplots(figsize=(5, 3))
    vals = np.nan_to_num(report.per_class_iou, nan=0.0)
    ax.bar(range(len(vals)), vals, color="#4878a8")
    ax.set_xticks(range(len(vals)), names, rotation=30, fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.axhline(report.miou, color="#a84848", linewidth=1, label=f"mIoU {report.miou:.3f}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    p = out / f"{prefix}_per_class_iou.png"
    fig.savefig(p, dpi=130)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(4.2, 3.8))
    conf = report.confusion.astype(np.float64)
    norm = conf / np.maximum(conf.sum(axis=1, keepdims=True), 1.0)
    im = ax.imshow(norm, cmap="viridis", vmin=0, vmax=1)
    ax.set_xticks(range(len(names)), names, rotation=30, fontsize=7)
    ax.set_yticks(range(len(names)), names, fontsize=7)
    ax.set_xlabel("prediction")
    ax.set_ylabel("ground truth")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    p = out / f"{prefix}_confusion.png"
    fig.savefig(p, dpi=130)
    plt.close(fig)
    paths.append(p)
    return paths


def save_sweep_figure(results: list[dict], grid: str, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    if grid == "mix":
        xs = sorted({r["class_ratio"] for r in results})
        ys = sorted({r["region_ratio"] for r in results})
        mat = np.full((len(ys), len(xs)), np.nan)
        for r in results:
            mat[ys.index(r["region_ratio"]), xs.index(r["class_ratio"])] = r["mIoU"]
        im = ax.imshow(mat, cmap="viridis", origin="lower")
        ax.set_xticks(range(len(xs)), [f"{v:g}" for v in xs])
        ax.set_yticks(range(len(ys)), [f"{v:g}" for v in ys])
        ax.set_xlabel("class ratio")
        ax.set_ylabel("region ratio")
        for (i, j), v in np.ndenumerate(mat):
            if np.isfinite(v):
                ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=7, color="w")
        fig.colorbar(im, ax=ax, shrink=0.8, label="mIoU")
    else:
        labels = [f"a={r['alpha']:g}\nb={r['beta']:g}" for r in results]
        ax.bar(range(len(results)), [r["mIoU"] for r in results], color="#4878a8")
        ax.set_xticks(range(len(results)), labels, fontsize=7)
        ax.set_ylabel("mIoU")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return Path(path)
