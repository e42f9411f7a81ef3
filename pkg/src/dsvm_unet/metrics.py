"""Segmentation metrics: confusion-based ratios, Dice per class, and HD95.

Empty-set convention: a ratio whose denominator is zero is 1 when the
prediction agrees (both sides empty) and 0 otherwise. HD95 is undefined
(NaN) when either mask is empty; aggregation skips and counts those.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .ssm import ContractError

__all__ = [
    "ConfusionCounts",
    "MetricReport",
    "confusion_counts",
    "segmentation_metrics",
    "boundary",
    "hd95",
    "binary_report",
    "multiclass_report",
    "aggregate",
    "pooled",
    "write_csv",
    "write_json",
    "REPORT_COLUMNS",
]

REPORT_COLUMNS = ("id", "miou", "dsc", "acc", "spe", "sen", "hd95")
_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass
class MetricReport:
    miou: float
    dsc: float
    acc: float
    spe: float
    sen: float
    hd95: float = math.nan
    id: str = ""
    per_class: Optional[List[dict]] = None
    hd95_undefined: int = 0

    def row(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_COLUMNS}

    @property
    def average(self) -> float:
        return (self.miou + self.dsc + self.acc + self.spe + self.sen) / 5


def _binary(a, name):
    a = np.asarray(a)
    if a.dtype != bool:
        if not np.isin(a, (0, 1)).all():
            raise ContractError(f"{name} must be binary")
        a = a.astype(bool)
    return a


def confusion_counts(pred_mask, gt_mask) -> ConfusionCounts:
    pred, gt = _binary(pred_mask, "pred_mask"), _binary(gt_mask, "gt_mask")
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, pred.size - tp - fp - fn, fn)


def _ratio(num: int, den: int, agree: bool) -> float:
    if den == 0:
        return 1.0 if agree else 0.0
    return num / den


def segmentation_metrics(c: ConfusionCounts) -> Dict[str, float]:
    """IoU (reported as miou), DSC, accuracy, specificity and sensitivity."""
    pred_fg_empty = c.tp + c.fp == 0
    pred_bg_empty = c.tn + c.fn == 0
    return {
        "miou": _ratio(c.tp, c.tp + c.fp + c.fn, True),
        "dsc": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, True),
        "acc": _ratio(c.tp + c.tn, c.total, True),
        "spe": _ratio(c.tn, c.tn + c.fp, pred_bg_empty),
        "sen": _ratio(c.tp, c.tp + c.fn, pred_fg_empty),
    }


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background or on the image edge."""
    mask = _binary(mask, "mask")
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def hd95(pred_mask, gt_mask, spacing: Sequence[float] = (1.0, 1.0), mode: str = "combined") -> float:
    """95th percentile boundary distance.

    ``combined`` takes the percentile of the pooled directed distances
    (pred->gt and gt->pred); ``max`` takes the larger of the two directed
    percentiles. Returns NaN if either mask is empty.
    """
    pred, gt = _binary(pred_mask, "pred_mask"), _binary(gt_mask, "gt_mask")
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        return math.nan
    bp, bg = boundary(pred), boundary(gt)
    # distance from every pixel to the nearest boundary pixel of the other mask
    to_gt = ndimage.distance_transform_edt(~bg, sampling=spacing)
    to_pred = ndimage.distance_transform_edt(~bp, sampling=spacing)
    d_pg, d_gp = to_gt[bp], to_pred[bg]
    if mode == "combined":
        return float(np.percentile(np.concatenate([d_pg, d_gp]), 95))
    if mode == "max":
        return float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95)))
    raise ValueError(f"unknown hd95 mode {mode!r}")


def binary_report(pred_mask, gt_mask, id: str = "", spacing=(1.0, 1.0), hd_mode: str = "combined") -> MetricReport:
    m = segmentation_metrics(confusion_counts(pred_mask, gt_mask))
    h = hd95(pred_mask, gt_mask, spacing, hd_mode)
    return MetricReport(**m, hd95=h, id=id, hd95_undefined=int(math.isnan(h)))


def multiclass_report(pred, gt, num_classes: int, id: str = "", spacing=(1.0, 1.0), hd_mode: str = "combined") -> MetricReport:
    """One-vs-rest metrics per foreground class; aggregates are means over those classes."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {gt.shape}")
    for a in (pred, gt):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise ContractError(f"class index out of range [0, {num_classes})")
    rows, reports = [], []
    for k in range(1, num_classes):
        r = binary_report(pred == k, gt == k, id, spacing, hd_mode)
        reports.append(r)
        rows.append({"class": k, "dsc": r.dsc, "hd95": r.hd95})
    agg = aggregate(reports)
    agg.id = id
    agg.per_class = rows
    return agg


def aggregate(reports: Iterable[MetricReport], id: str = "mean") -> MetricReport:
    """Mean over reports; undefined HD95 values are skipped and counted."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to aggregate")
    mean = lambda k: float(np.mean([getattr(r, k) for r in reports]))
    hds = np.array([r.hd95 for r in reports], dtype=float)
    defined = hds[~np.isnan(hds)]
    per_class = None
    if all(r.per_class for r in reports):
        per_class = []
        for rows in zip(*(r.per_class for r in reports)):
            h = np.array([x["hd95"] for x in rows], dtype=float)
            per_class.append(
                {
                    "class": rows[0]["class"],
                    "dsc": float(np.mean([x["dsc"] for x in rows])),
                    "hd95": float(np.mean(h[~np.isnan(h)])) if (~np.isnan(h)).any() else math.nan,
                }
            )
    return MetricReport(
        miou=mean("miou"),
        dsc=mean("dsc"),
        acc=mean("acc"),
        spe=mean("spe"),
        sen=mean("sen"),
        hd95=float(defined.mean()) if defined.size else math.nan,
        id=id,
        per_class=per_class,
        hd95_undefined=int(np.isnan(hds).sum()),
    )


def pooled(counts: Iterable[ConfusionCounts], id: str = "pooled") -> MetricReport:
    total = ConfusionCounts(0, 0, 0, 0)
    for c in counts:
        total = total + c
    return MetricReport(**segmentation_metrics(total), id=id)


def _fmt(v):
    if isinstance(v, float) and math.isnan(v):
        return ""
    return v


def write_csv(path, reports: Iterable[MetricReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([_fmt(r.row()[k]) for k in REPORT_COLUMNS])


def write_json(path, reports: Iterable[MetricReport], summary: Optional[MetricReport] = None) -> None:
    def clean(d):
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}

    payload = {"columns": list(REPORT_COLUMNS), "images": [clean(r.row()) for r in reports]}
    if summary is not None:
        s = clean(asdict(summary))
        if summary.per_class:
            s["per_class"] = [clean(row) for row in summary.per_class]
        payload["summary"] = s
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
