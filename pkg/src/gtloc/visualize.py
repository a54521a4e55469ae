"""Rendering: per-image localization overlays and per-run report figures.

Overlays follow the usual convention: ground-truth boxes in red, predicted
boxes in green, the coarse map as a translucent heatmap, and the selected
mask as a contour.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from .data_pipeline import IMAGENET_MEAN, IMAGENET_STD
from .eval_metrics import BBox, BoxAccResult, EvalReport, upsample_map


def unnormalize(image: torch.Tensor, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """Normalized (3,h,w) tensor back to a displayable HWC float image."""
    arr = image.detach().cpu().numpy()
    arr = arr * np.asarray(std).reshape(3, 1, 1) + np.asarray(mean).reshape(3, 1, 1)
    return np.clip(arr.transpose(1, 2, 0), 0.0, 1.0)


def _draw_box(ax, box: BBox, color: str):
    ax.add_patch(
        plt.Rectangle(
            (box.x_min, box.y_min),
            box.x_max - box.x_min,
            box.y_max - box.y_min,
            fill=False,
            edgecolor=color,
            linewidth=2,
        )
    )


def save_overlay(
    image: np.ndarray,
    out_path: str | Path,
    fg_map: np.ndarray | None = None,
    final_mask: np.ndarray | None = None,
    gt_boxes: list[BBox] | None = None,
    pred_box: BBox | None = None,
) -> Path:
    """Write one overlay image; inputs beyond the base image are optional."""
    h, w = image.shape[:2]
    fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
    ax.imshow(image)
    if fg_map is not None:
        heat = upsample_map(np.asarray(fg_map, dtype=np.float32), (h, w))
        ax.imshow(heat, cmap="jet", alpha=0.4, vmin=0.0, vmax=1.0)
    if final_mask is not None:
        ax.contour(final_mask.astype(float), levels=[0.5], colors="white", linewidths=1.5)
    for box in gt_boxes or []:
        _draw_box(ax, box, "red")
    if pred_box is not None:
        _draw_box(ax, pred_box, "lime")
    ax.set_xlim(0, w)
    ax.set_ylim(h, 0)
    ax.axis("off")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, bbox_inches="tight", pad_inches=0)
    plt.close(fig)
    return out_path


def write_report_csv(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["gt_known", f"{report.gt_known:.4f}"])
        writer.writerow(["top1_loc", f"{report.top1_loc:.4f}"])
        writer.writerow(["top5_loc", f"{report.top5_loc:.4f}"])
        for delta in sorted(report.box_acc):
            writer.writerow([f"box_acc@{delta:g}", f"{report.box_acc[delta]:.4f}"])
        writer.writerow(["mean_box_acc", f"{report.mean_box_acc:.4f}"])
        writer.writerow(["num_images", report.num_images])
    return path


def save_report_figures(report: EvalReport, acc: BoxAccResult, out_dir: str | Path) -> list[Path]:
    """Threshold-sweep curves and a metric summary bar chart."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=120)
    for row, delta in zip(acc.curve, sorted(report.box_acc)):
        ax.plot(acc.taus, row, label=f"IoU ≥ {delta:g}")
    ax.set_xlabel("binarization threshold")
    ax.set_ylabel("box accuracy (%)")
    ax.set_ylim(0, 105)
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    curve_path = out_dir / "box_acc_curve.png"
    fig.savefig(curve_path)
    plt.close(fig)
    paths.append(curve_path)

    labels = ["GT-Known", "Top-1", "Top-5", "Mean BoxAcc"]
    values = [report.gt_known, report.top1_loc, report.top5_loc, report.mean_box_acc]
    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=120)
    bars = ax.bar(labels, values, color=["#4c72b0", "#dd8452", "#55a868", "#c44e52"])
    ax.bar_label(bars, fmt="%.1f", fontsize=8)
    ax.set_ylim(0, 105)
    ax.set_ylabel("percentage")
    fig.tight_layout()
    summary_path = out_dir / "metrics_summary.png"
    fig.savefig(summary_path)
    plt.close(fig)
    paths.append(summary_path)
    return paths
