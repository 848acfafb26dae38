"""Matching detections to ground truth, FP/FN/miss-rate/accuracy, counting."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from . import boxes as bx


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list = field(default_factory=list)  # (det index, gt index, iou)

    @property
    def n_gt(self):
        return self.tp + self.fn

    @property
    def n_det(self):
        return self.tp + self.fp


def _unpack(dets):
    """Boxes and scores from Detection objects, dicts or ``(box, score)`` pairs."""
    boxes, scores = [], []
    for d in dets:
        if hasattr(d, "box"):
            boxes.append(d.box)
            scores.append(d.probability)
        elif isinstance(d, dict):
            boxes.append((d["xmin"], d["ymin"], d["xmax"], d["ymax"]))
            scores.append(d["probability"])
        else:
            boxes.append(d[0])
            scores.append(d[1])
    return bx.as_boxes(boxes), np.asarray(scores, dtype=np.float64)


def match_detections(dets, gts, iou_threshold=0.5) -> MatchResult:
    """Greedy matching: by descending probability, each detection claims the
    unclaimed ground truth of highest IoU when that IoU reaches the threshold."""
    if not 0 < iou_threshold <= 1:
        raise ValueError("iou_threshold must be in (0, 1]")
    db, ds = _unpack(dets)
    gb = bx.as_boxes(gts)
    if len(db) == 0 or len(gb) == 0:
        return MatchResult(0, len(db), len(gb))
    ious = bx.iou_matrix(db, gb)
    claimed = np.zeros(len(gb), dtype=bool)
    pairs = []
    for i in bx.score_order(db, ds):
        cand = np.where(claimed, -1.0, ious[i])
        j = int(cand.argmax())
        if cand[j] >= iou_threshold:
            claimed[j] = True
            pairs.append((int(i), j, float(ious[i, j])))
    tp = len(pairs)
    return MatchResult(tp, len(db) - tp, len(gb) - tp, pairs)


def percent(x: float) -> float:
    """Fraction -> percent rounded half-up to one decimal."""
    return float(Decimal(repr(x * 100.0)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


@dataclass
class MetricsReport:
    images: int
    fp: int
    fn: int
    gt: int
    miss_rate: float
    accuracy: float
    per_image_counts: list = field(default_factory=list)

    @property
    def miss_rate_pct(self):
        return percent(self.miss_rate)

    @property
    def accuracy_pct(self):
        return percent(self.accuracy)

    def as_dict(self):
        return {
            "images": self.images,
            "fp": self.fp,
            "fn": self.fn,
            "gt": self.gt,
            "miss_rate": self.miss_rate,
            "accuracy": self.accuracy,
            "miss_rate_pct": self.miss_rate_pct,
            "accuracy_pct": self.accuracy_pct,
            "per_image_counts": list(self.per_image_counts),
        }

    def to_json(self):
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    def table(self):
        head = ("No of Test Images", "False Positive", "False Negative", "Overall Miss Rate", "Overall Accuracy")
        row = (str(self.images), str(self.fp), str(self.fn), f"{self.miss_rate_pct:.1f}%", f"{self.accuracy_pct:.1f}%")
        widths = [max(len(h), len(r)) for h, r in zip(head, row)]
        line = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))  # noqa: E731
        return line(head) + "\n" + line(row) + "\n"


def compute_metrics(results, counts=None) -> MetricsReport:
    results = list(results)
    fp = sum(r.fp for r in results)
    fn = sum(r.fn for r in results)
    gt = sum(r.n_gt for r in results)
    if gt == 0:
        raise ValueError("no ground-truth boxes: miss rate and accuracy are undefined")
    counts = [r.n_det for r in results] if counts is None else list(counts)
    return MetricsReport(len(results), fp, fn, gt, fn / gt, max(0.0, (gt - fn - fp) / gt), counts)


def count_cells(dets_per_image, wbc_class=1):
    """Per-image WBC detection counts and their total."""
    counts = []
    for dets in dets_per_image:
        n = 0
        for d in dets:
            cid = getattr(d, "class_id", None)
            if cid is None and isinstance(d, dict):
                cid = d.get("class_id", wbc_class)
            n += (cid if cid is not None else wbc_class) == wbc_class
        counts.append(int(n))
    return counts, sum(counts)
