"""Localization metric suite: box IoU, GT-Known, Top-k Loc, and box accuracy
maximized over heatmap binarization thresholds.

Boxes are axis-aligned with half-open max edges. Per-image localization is
correct at threshold delta when the predicted box reaches IoU >= delta with
at least one ground-truth box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import InputError

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
DEFAULT_DELTAS = (0.3, 0.5, 0.7, 0.9)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel box, half-open on the max edges."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InputError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def clip(self, width: float, height: float) -> "BBox":
        """Clamp into [0, width) x [0, height); boxes fully outside collapse
        to a 1px sliver at the nearest border rather than vanishing."""
        x_min = max(0.0, min(self.x_min, width - 1))
        y_min = max(0.0, min(self.y_min, height - 1))
        x_max = min(float(width), max(self.x_max, x_min + 1))
        y_max = min(float(height), max(self.y_max, y_min + 1))
        return BBox(x_min, y_min, x_max, y_max)


def box_iou(a: BBox, b: BBox) -> float:
    """Area IoU of two boxes; 0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def bbox_from_mask(mask: np.ndarray) -> BBox:
    """Tight box of the largest 4-connected component of a binary mask."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise InputError("cannot extract a box from an empty mask")
    labels, n = ndimage.label(mask, structure=FOUR_CONNECTED)
    if n > 1:
        sizes = np.bincount(labels.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1  # ties: first label in scan order
        mask = labels == keep
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def upsample_map(fg_map: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Bilinear upsampling of a low-resolution map to pixel resolution."""
    t = torch.from_numpy(np.asarray(fg_map, dtype=np.float32))[None, None]
    up = F.interpolate(t, size=out_shape, mode="bilinear", align_corners=False)
    return up[0, 0].numpy()


def bbox_from_map(fg_map: np.ndarray, threshold: float, out_shape: tuple[int, int]) -> BBox:
    """Upsample a heatmap, binarize at threshold * max, take the component box."""
    up = upsample_map(fg_map, out_shape)
    return bbox_from_mask(up >= threshold * up.max())


# ---------------------------------------------------------------------------
# Record-level metrics.


@dataclass
class PredictionRecord:
    """One evaluated image: predicted box, class ranking, and ground truth."""

    image_id: str
    predicted_box: BBox
    top5_classes: list[int]
    gt_boxes: list[BBox]
    gt_class: int

    def __post_init__(self):
        if len(set(self.top5_classes)) != len(self.top5_classes):
            raise InputError(f"{self.image_id}: duplicate classes in top-5")
        if not self.gt_boxes:
            raise InputError(f"{self.image_id}: no ground-truth boxes")

    def loc_iou(self) -> float:
        return max(box_iou(self.predicted_box, g) for g in self.gt_boxes)

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "predicted_box": list(self.predicted_box.as_tuple()),
            "top5_classes": list(self.top5_classes),
            "gt_boxes": [list(b.as_tuple()) for b in self.gt_boxes],
            "gt_class": self.gt_class,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PredictionRecord":
        return cls(
            image_id=obj["image_id"],
            predicted_box=BBox(*obj["predicted_box"]),
            top5_classes=[int(c) for c in obj["top5_classes"]],
            gt_boxes=[BBox(*b) for b in obj["gt_boxes"]],
            gt_class=int(obj["gt_class"]),
        )


def gt_known(records: list[PredictionRecord], delta: float = 0.5) -> float:
    """Percentage of images localized at IoU >= delta, classification ignored."""
    if not records:
        return 0.0
    hits = sum(1 for r in records if r.loc_iou() >= delta)
    return 100.0 * hits / len(records)


def topk_loc(records: list[PredictionRecord], k: int, delta: float = 0.5) -> float:
    """Percentage with the true class in the top-k AND localization correct."""
    if not records:
        return 0.0
    hits = sum(
        1
        for r in records
        if r.gt_class in r.top5_classes[:k] and r.loc_iou() >= delta
    )
    return 100.0 * hits / len(records)


# ---------------------------------------------------------------------------
# Box accuracy over a binarization-threshold sweep.


def sweep_thresholds(num: int = 100) -> np.ndarray:
    """`num` uniform thresholds strictly inside (0, 1)."""
    return np.linspace(0.0, 1.0, num + 2)[1:-1]


@dataclass
class BoxAccResult:
    """Max box accuracy per IoU threshold, with the underlying sweep curve."""

    per_delta: dict[float, float]
    taus: np.ndarray
    curve: np.ndarray = field(repr=False)  # (n_deltas, n_taus) percentages

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_delta.values())))


def max_box_acc_v2(
    predictions: list[np.ndarray],
    gt_boxes: list[list[BBox]],
    deltas: tuple[float, ...] = DEFAULT_DELTAS,
    image_shape: tuple[int, int] | None = None,
    num_thresholds: int = 100,
) -> BoxAccResult:
    """Box accuracy maximized over the binarization threshold.

    Heatmap inputs (float 2-d arrays) are binarized at tau * max over the
    sweep; binary masks skip the sweep, their single box counting at every
    tau. `image_shape` defaults to each prediction's own shape (pass the
    pixel resolution when predictions are low-resolution maps).
    """
    if len(predictions) != len(gt_boxes):
        raise InputError("predictions and gt_boxes length mismatch")
    taus = sweep_thresholds(num_thresholds)
    ious = np.zeros((len(predictions), taus.size))
    for i, (pred, boxes) in enumerate(zip(predictions, gt_boxes)):
        pred = np.asarray(pred)
        if pred.dtype == np.bool_:
            box = bbox_from_mask(pred)
            ious[i, :] = max(box_iou(box, g) for g in boxes)
            continue
        shape = image_shape or pred.shape
        up = upsample_map(pred, shape)
        peak = up.max()
        for j, tau in enumerate(taus):
            box = bbox_from_mask(up >= tau * peak)
            ious[i, j] = max(box_iou(box, g) for g in boxes)
    curve = np.stack([100.0 * np.mean(ious >= d, axis=0) for d in deltas])
    per_delta = {d: float(curve[k].max()) for k, d in enumerate(deltas)}
    return BoxAccResult(per_delta=per_delta, taus=taus, curve=curve)


# ---------------------------------------------------------------------------
# Aggregate report.


@dataclass
class EvalReport:
    """Aggregate localization metrics, all percentages in [0, 100]."""

    gt_known: float
    top1_loc: float
    top5_loc: float
    box_acc: dict[float, float]
    mean_box_acc: float
    num_images: int = 0

    def to_json(self) -> dict:
        return {
            "gt_known": self.gt_known,
            "top1_loc": self.top1_loc,
            "top5_loc": self.top5_loc,
            "box_acc": {f"{d:g}": v for d, v in self.box_acc.items()},
            "mean_box_acc": self.mean_box_acc,
            "num_images": self.num_images,
        }

    def table(self) -> str:
        rows = [
            ("GT-Known", self.gt_known),
            ("Top-1 Loc", self.top1_loc),
            ("Top-5 Loc", self.top5_loc),
            *((f"BoxAcc@{d:g}", v) for d, v in sorted(self.box_acc.items())),
            ("Mean BoxAcc", self.mean_box_acc),
        ]
        width = max(len(name) for name, _ in rows)
        lines = [f"{name:<{width}}  {value:6.2f}" for name, value in rows]
        return "\n".join(lines)


def compute_report(
    records: list[PredictionRecord],
    predictions: list[np.ndarray] | None = None,
    deltas: tuple[float, ...] = DEFAULT_DELTAS,
    delta: float = 0.5,
    image_shape: tuple[int, int] | None = None,
    num_thresholds: int = 100,
) -> tuple[EvalReport, BoxAccResult]:
    """Full metric report from prediction records.

    When per-image maps/masks are provided they drive the box-accuracy
    sweep; otherwise the records' boxes are scored directly at each delta.
    """
    if predictions is not None:
        acc = max_box_acc_v2(
            predictions,
            [r.gt_boxes for r in records],
            deltas=deltas,
            image_shape=image_shape,
            num_thresholds=num_thresholds,
        )
    else:
        ious = np.array([r.loc_iou() for r in records]) if records else np.zeros(0)
        curve = np.stack([[100.0 * np.mean(ious >= d)] for d in deltas]) if records else np.zeros((len(deltas), 1))
        acc = BoxAccResult(
            per_delta={d: float(curve[k, 0]) for k, d in enumerate(deltas)},
            taus=np.array([1.0]),
            curve=curve,
        )
    report = EvalReport(
        gt_known=gt_known(records, delta),
        top1_loc=topk_loc(records, 1, delta),
        top5_loc=topk_loc(records, 5, delta),
        box_acc=acc.per_delta,
        mean_box_acc=acc.mean,
        num_images=len(records),
    )
    return report, acc
