"""Pixel confusion metrics per class and their fold-wise aggregation.

A metric whose denominator is zero is *undefined* and represented as
``None``. Undefined values never enter a mean or a standard deviation.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping

import numpy as np

from hierseg.masks import BACKGROUND, MFP, MTP, _same_shape

METRICS = ("IoU", "Dice", "Precision", "Recall")
REPORT_CLASSES = ("MTP", "MFP", "FULL")


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"negative confusion count in {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def binary_confusion(pred, target) -> ConfusionCounts:
    _same_shape(pred, target)
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(target, dtype=bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def confusion(pred, target, class_id: int) -> ConfusionCounts:
    return binary_confusion(np.asarray(pred) == class_id, np.asarray(target) == class_id)


def full_contact_metrics(pred, target) -> ConfusionCounts:
    """Confusion of the FULL contact parent class, i.e. any non-background label."""
    return binary_confusion(np.asarray(pred) != BACKGROUND, np.asarray(target) != BACKGROUND)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def iou(c: ConfusionCounts) -> float | None:
    return _ratio(c.tp, c.tp + c.fp + c.fn)


def dice(c: ConfusionCounts) -> float | None:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def precision(c: ConfusionCounts) -> float | None:
    return _ratio(c.tp, c.tp + c.fp)


def recall(c: ConfusionCounts) -> float | None:
    return _ratio(c.tp, c.tp + c.fn)


def metric_values(c: ConfusionCounts) -> dict[str, float | None]:
    return {"IoU": iou(c), "Dice": dice(c), "Precision": precision(c), "Recall": recall(c)}


def image_metrics(pred, target) -> dict[str, dict[str, float | None]]:
    """MTP, MFP and FULL metrics for one predicted label mask."""
    return {
        "MTP": metric_values(confusion(pred, target, MTP)),
        "MFP": metric_values(confusion(pred, target, MFP)),
        "FULL": metric_values(full_contact_metrics(pred, target)),
    }


def mean_std(values: Iterable[float | None]) -> tuple[float | None, float | None, int]:
    """Mean and sample standard deviation of the defined values, plus their count.

    A single value has standard deviation 0.
    """
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None, 0
    arr = np.asarray(vals, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std, len(arr)


@dataclass
class MetricsReport:
    # summary[cls][metric] = (mean of fold means, mean of fold stds)
    summary: dict[str, dict[str, tuple[float | None, float | None]]]
    # folds[fold][cls][metric] = (mean, std, n)
    folds: dict[Hashable, dict[str, dict[str, tuple[float | None, float | None, int]]]]
    rows: list[dict] = field(default_factory=list)

    def to_table(self, digits: int = 4) -> str:
        def fmt(v):
            return "undefined" if v is None else f"{v:.{digits}f}"

        lines = [f"{'class':<6} {'metric':<10} {'mean':>10} {'mean_std':>10}"]
        for cls, per_metric in self.summary.items():
            for metric, (m, s) in per_metric.items():
                lines.append(f"{cls:<6} {metric:<10} {fmt(m):>10} {fmt(s):>10}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        data = {
            "summary": {c: {k: {"mean": m, "mean_std": s} for k, (m, s) in v.items()}
                        for c, v in self.summary.items()},
            "folds": {str(f): {c: {k: {"mean": m, "std": s, "n": n} for k, (m, s, n) in v.items()}
                               for c, v in per.items()}
                      for f, per in self.folds.items()},
        }
        return json.dumps(data, indent=2, sort_keys=True)

    def rows_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.rows)


def aggregate_folds(per_image: Mapping[Hashable, Mapping[str, Mapping[str, float | None]]],
                    fold_of_image: Mapping[Hashable, Hashable],
                    folds: Iterable[Hashable] | None = None,
                    classes: Iterable[str] = REPORT_CLASSES) -> MetricsReport:
    """Per-fold mean/std over validation images, then averaged across folds.

    ``folds`` names the folds that must be present; a named fold without any
    image is a configuration error.
    """
    classes = list(classes)
    missing = [img for img in per_image if img not in fold_of_image]
    if missing:
        raise AggregationError(f"images without a fold: {missing[:5]}")

    by_fold: dict[Hashable, list] = defaultdict(list)
    for img in per_image:
        by_fold[fold_of_image[img]].append(img)
    expected = list(folds) if folds is not None else sorted(by_fold, key=str)
    empty = [f for f in expected if not by_fold.get(f)]
    if empty or not expected:
        raise AggregationError(f"folds without validation images: {empty or 'all'}")

    fold_stats = {}
    for f in expected:
        imgs = sorted(by_fold[f], key=str)
        fold_stats[f] = {
            cls: {m: mean_std(per_image[i][cls][m] for i in imgs) for m in METRICS}
            for cls in classes
        }

    summary = {}
    for cls in classes:
        summary[cls] = {}
        for m in METRICS:
            stats = [fold_stats[f][cls][m] for f in expected if fold_stats[f][cls][m][2] > 0]
            if not stats:
                summary[cls][m] = (None, None)
                continue
            summary[cls][m] = (math.fsum(s[0] for s in stats) / len(stats),
                               math.fsum(s[1] for s in stats) / len(stats))

    rows = []
    for f in expected:
        for img in sorted(by_fold[f], key=str):
            for cls in classes:
                rows.append({"image": str(img), "fold": f, "class": cls,
                             **{m: per_image[img][cls][m] for m in METRICS}})
    return MetricsReport(summary, fold_stats, rows)


def report_from_rows(rows: Iterable[Mapping]) -> dict[str, dict[str, tuple[float | None, float | None]]]:
    """Recompute the summary table from per-image records (as written to JSONL)."""
    per_image = defaultdict(dict)
    fold_of = {}
    classes = []
    for r in rows:
        key = (r["fold"], r["image"])
        per_image[key][r["class"]] = {m: r[m] for m in METRICS}
        fold_of[key] = r["fold"]
        if r["class"] not in classes:
            classes.append(r["class"])
    return aggregate_folds(per_image, fold_of, classes=classes).summary
