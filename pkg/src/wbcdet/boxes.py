"""Box algebra on ``(x_min, y_min, x_max, y_max)`` arrays.

Coordinates are continuous pixels, origin top-left, and a box's area is
``(x_max - x_min) * (y_max - y_min)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class AnchorSpec:
    scales: tuple = (16.0, 24.0, 32.0)
    ratios: tuple = (0.5, 1.0, 2.0)
    stride: int = 2

    @property
    def k(self) -> int:
        return len(self.scales) * len(self.ratios)


def as_boxes(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    if b.size == 0:
        return b.reshape(0, 4)
    return b.reshape(-1, 4)


def valid_box(b) -> bool:
    x0, y0, x1, y1 = b
    return bool(np.all(np.isfinite(b)) and x0 < x1 and y0 < y1)


def area(boxes) -> np.ndarray:
    b = as_boxes(boxes)
    return (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])


def iou(a, b) -> float:
    """IoU of two single boxes."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape ``[len(a), len(b)]``."""
    a = as_boxes(a)
    b = as_boxes(b)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area(a)[:, None] + area(b)[None, :] - inter
    return inter / union


def base_anchors(spec: AnchorSpec) -> np.ndarray:
    """The k anchors of cell (0, 0), ordered scale-major."""
    if not spec.scales or not spec.ratios:
        raise ValueError("anchor spec needs at least one scale and one ratio")
    c = spec.stride / 2.0
    out = []
    for s in spec.scales:
        for r in spec.ratios:
            if s <= 0 or r <= 0:
                raise ValueError("anchor scales and ratios must be positive")
            w = s * np.sqrt(r)
            h = s / np.sqrt(r)
            out.append((c - w / 2, c - h / 2, c + w / 2, c + h / 2))
    return np.array(out, dtype=np.float64)


def generate_anchors(feat_w: int, feat_h: int, spec: AnchorSpec) -> np.ndarray:
    """All ``feat_w * feat_h * k`` anchors, ordered (row, col, anchor).

    Anchor ``a`` of cell ``(y, x)`` sits at index ``(y * feat_w + x) * k + a``.
    """
    if feat_w < 1 or feat_h < 1:
        raise ValueError("feature grid must be at least 1x1")
    base = base_anchors(spec)
    xs = np.arange(feat_w, dtype=np.float64) * spec.stride
    ys = np.arange(feat_h, dtype=np.float64) * spec.stride
    sy, sx = np.meshgrid(ys, xs, indexing="ij")
    shifts = np.stack([sx, sy, sx, sy], axis=-1).reshape(-1, 1, 4)
    return (shifts + base[None]).reshape(-1, 4)


def _center_form(b):
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    return b[..., 0] + 0.5 * w, b[..., 1] + 0.5 * h, w, h


def encode_boxes(anchors, gt) -> np.ndarray:
    """Regression targets ``(tx, ty, tw, th)`` taking ``anchors`` onto ``gt``."""
    anchors = np.asarray(anchors, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    ax, ay, aw, ah = _center_form(anchors)
    gx, gy, gw, gh = _center_form(gt)
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=-1)


def decode_boxes(anchors, deltas) -> np.ndarray:
    """Inverse of :func:`encode_boxes`."""
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    ax, ay, aw, ah = _center_form(anchors)
    cx = deltas[..., 0] * aw + ax
    cy = deltas[..., 1] * ah + ay
    w = np.exp(deltas[..., 2]) * aw
    h = np.exp(deltas[..., 3]) * ah
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def encode_box(anchor, gt):
    return tuple(float(v) for v in encode_boxes(anchor, gt))


def decode_box(anchor, t):
    return tuple(float(v) for v in decode_boxes(anchor, t))


def clip_boxes(boxes, img_w, img_h) -> np.ndarray:
    b = as_boxes(boxes).copy()
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, img_w)
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, img_h)
    return b


def clip_box(box, img_w, img_h):
    """Clamp one box to the image; ``None`` if nothing with positive area remains."""
    b = clip_boxes(box, img_w, img_h)[0]
    if b[2] <= b[0] or b[3] <= b[1]:
        return None
    return tuple(float(v) for v in b)


def score_order(boxes, scores) -> np.ndarray:
    """Descending score; equal scores by ascending x_min, then y_min, then index."""
    b = as_boxes(boxes)
    s = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(s)), b[:, 1], b[:, 0], -s))


def nms(boxes, scores, iou_threshold: float, max_keep: int | None = None) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices, best first.

    A remaining box is dropped when its IoU with a kept box exceeds
    ``iou_threshold``.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError("iou_threshold must be in (0, 1]")
    b = as_boxes(boxes)
    if max_keep is not None and max_keep < 0:
        raise ValueError("max_keep must be >= 0")
    limit = len(b) if max_keep is None else max_keep
    order = score_order(b, scores)
    x0, y0, x1, y1 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    areas = (x1 - x0) * (y1 - y0)
    keep = []
    while order.size and len(keep) < limit:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.clip(np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest]), 0, None)
        ih = np.clip(np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest]), 0, None)
        inter = iw * ih
        ov = inter / (areas[i] + areas[rest] - inter)
        order = rest[ov <= iou_threshold]
    return np.array(keep, dtype=np.int64)


def boxes_inside(boxes: Sequence, img_w, img_h) -> bool:
    b = as_boxes(boxes)
    return bool(np.all((b[:, 0] >= 0) & (b[:, 1] >= 0) & (b[:, 2] <= img_w) & (b[:, 3] <= img_h)))
