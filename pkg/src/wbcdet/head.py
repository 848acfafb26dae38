"""Detection stage: ROI max pooling and the two-branch classifier head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import boxes as bx
from .tensor import ReLU, Linear, ShapeError, softmax

_EPS = 1e-9


@dataclass(frozen=True)
class Detection:
    box: tuple
    probability: float
    class_id: int = 1

    def as_dict(self):
        x0, y0, x1, y1 = self.box
        return {"xmin": x0, "ymin": y0, "xmax": x1, "ymax": y1, "probability": self.probability}


def _bin_edges(lo, hi, pooled, limit):
    """Integer [start, end) cell ranges of ``pooled`` even bins over [lo, hi)."""
    step = (hi - lo) / pooled
    j = np.arange(pooled)
    start = np.floor(lo[..., None] + j * step[..., None] + _EPS).astype(np.int64)
    end = np.ceil(lo[..., None] + (j + 1) * step[..., None] - _EPS).astype(np.int64)
    start = np.clip(start, 0, limit - 1)
    end = np.clip(np.maximum(end, start + 1), start + 1, limit)
    return start, end


def roi_pool_batch(feature_map, proposals, spatial_scale, pooled, with_argmax=True):
    """Pool every proposal to ``[C, pooled, pooled]``.

    Returns ``(out [R, C, P, P], argmax [R, C, P, P])`` with argmax as flat
    indices into each channel's ``H*W`` plane (``None`` unless ``with_argmax``).
    The rectangle max is taken over rows first, then columns.
    """
    fm = np.asarray(feature_map, dtype=np.float64)
    C, H, W = fm.shape
    p = bx.as_boxes(proposals) * spatial_scale
    R = len(p)
    if R == 0:
        empty = np.zeros((0, C, pooled, pooled))
        return empty, (empty.astype(np.int64) if with_argmax else None)
    outside = (p[:, 2] <= 0) | (p[:, 3] <= 0) | (p[:, 0] >= W) | (p[:, 1] >= H)
    if np.any(outside):
        raise ValueError("proposal lies entirely outside the feature map")
    hs, he = _bin_edges(p[:, 1], p[:, 3], pooled, H)
    ws, we = _bin_edges(p[:, 0], p[:, 2], pooled, W)
    mh = int((he - hs).max())
    mw = int((we - ws).max())
    # bins span at most a few cells: accumulate maxima offset by offset
    ih = np.minimum(hs[..., None] + np.arange(mh), he[..., None] - 1)  # [R, P, mh]
    iw = np.minimum(ws[..., None] + np.arange(mw), we[..., None] - 1)  # [R, P, mw]
    rmax = fm[:, ih[:, :, 0]]  # [C, R, P, W]
    rarg = np.broadcast_to(ih[None, :, :, 0, None], rmax.shape) if with_argmax else None
    for a in range(1, mh):
        cand = fm[:, ih[:, :, a]]
        better = cand > rmax
        rmax = np.where(better, cand, rmax)
        if with_argmax:
            rarg = np.where(better, ih[None, :, :, a, None], rarg)
    ri = np.arange(R)[:, None, None]
    ii = np.arange(pooled)[None, :, None]
    jj = iw[:, None, :, 0]
    out = rmax[:, ri, ii, jj]  # [C, R, P, P]
    if with_argmax:
        row = rarg[:, ri, ii, jj]
        col = np.broadcast_to(jj, out.shape).copy()
    for b in range(1, mw):
        jj = iw[:, None, :, b]
        cand = rmax[:, ri, ii, jj]
        better = cand > out
        out = np.where(better, cand, out)
        if with_argmax:
            row = np.where(better, rarg[:, ri, ii, jj], row)
            col = np.where(better, jj, col)
    out = out.transpose(1, 0, 2, 3)
    if not with_argmax:
        return out, None
    return out, (row * W + col).transpose(1, 0, 2, 3)


def roi_pool(feature_map, proposal, spatial_scale, pooled):
    """Single-proposal ROI pooling; returns ``(out [C, P, P], argmax)``."""
    out, arg = roi_pool_batch(feature_map, [proposal], spatial_scale, pooled)
    return out[0], arg[0]


def roi_pool_backward(grad, argmax, feature_shape):
    """Route each bin's gradient to its argmax cell (summing collisions)."""
    C, H, W = feature_shape
    grad = np.asarray(grad, dtype=np.float64)
    if grad.ndim == 3:
        grad, argmax = grad[None], np.asarray(argmax)[None]
    d = np.zeros((C, H * W))
    g = grad.transpose(1, 0, 2, 3).reshape(C, -1)
    a = argmax.transpose(1, 0, 2, 3).reshape(C, -1)
    for c in range(C):
        d[c] = np.bincount(a[c], weights=g[c], minlength=H * W)
    return d.reshape(C, H, W)


class DetectorHead:
    """Flattened ROI -> FC + ReLU -> {class logits, per-class box deltas}."""

    def __init__(self, in_features, hidden=64, num_classes=2, rng=None, zero=False):
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_features = in_features
        self.num_classes = num_classes
        self.fc = Linear(in_features, hidden, rng=rng, zero=zero)
        self.act = ReLU()
        self.cls = Linear(hidden, num_classes, rng=rng, zero=zero)
        self.reg = Linear(hidden, 4 * (num_classes - 1), rng=rng, zero=True)

    def parameters(self):
        return self.fc.parameters() + self.cls.parameters() + self.reg.parameters()

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"head expects {self.in_features} features, got {x.shape[-1]}")
        h = self.act.forward(self.fc.forward(x))
        return self.cls.forward(h), self.reg.forward(h)

    def backward(self, dlogits, ddeltas):
        dh = self.cls.backward(dlogits) + self.reg.backward(ddeltas)
        return self.fc.backward(self.act.backward(dh))


def classify_rois(roi, head: DetectorHead):
    """Class probabilities and per-foreground-class deltas for pooled ROIs.

    ``roi`` is ``[C, P, P]`` or a batch ``[R, C, P, P]``.
    """
    roi = np.asarray(roi, dtype=np.float64)
    single = roi.ndim == 3
    flat = roi.reshape(1 if single else roi.shape[0], -1)
    logits, deltas = head.forward(flat)
    probs = softmax(logits, axis=1)
    deltas = deltas.reshape(len(flat), head.num_classes - 1, 4)
    if single:
        return probs[0], deltas[0]
    return probs, deltas
