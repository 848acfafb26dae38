"""Region proposal network: anchor labeling, sampling, loss, proposals."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import boxes as bx
from .tensor import Conv2d, ReLU, smooth_l1, softmax, softmax_cross_entropy

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass(frozen=True)
class LossConfig:
    lam: float = 10.0
    n_cls: int = 256
    # None -> number of anchor locations (feature cells)
    n_reg: int | None = None

    def __post_init__(self):
        if self.lam <= 0 or self.n_cls <= 0 or (self.n_reg is not None and self.n_reg <= 0):
            raise ValueError("lambda, n_cls and n_reg must be positive")


@dataclass(frozen=True)
class ProposalConfig:
    pre_nms_top: int = 6000
    post_nms_top: int = 300
    nms_iou: float = 0.7
    min_size: float = 4.0

    def __post_init__(self):
        if self.post_nms_top > self.pre_nms_top or self.post_nms_top < 1:
            raise ValueError("need 1 <= post_nms_top <= pre_nms_top")
        if not 0 < self.nms_iou <= 1:
            raise ValueError("nms_iou must be in (0, 1]")


@dataclass
class RpnOutput:
    """Per-anchor objectness logits ``[N, 2]`` (background, object) and deltas ``[N, 4]``."""

    logits: np.ndarray
    deltas: np.ndarray

    @property
    def objectness(self) -> np.ndarray:
        return softmax(self.logits, axis=1)

    @property
    def scores(self) -> np.ndarray:
        return self.objectness[:, 1]


def label_anchors(anchors, gt, pos_iou=0.7, neg_iou=0.3):
    """Label anchors positive / negative / ignore against ground-truth boxes.

    Returns ``(labels, matched)``: ``labels`` in {1, 0, -1}; ``matched`` is the
    gt index for positives and -1 elsewhere.
    """
    if pos_iou <= neg_iou:
        raise ValueError("pos_iou must exceed neg_iou")
    anchors = bx.as_boxes(anchors)
    gt = bx.as_boxes(gt)
    n = len(anchors)
    labels = np.full(n, IGNORE, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt) == 0:
        labels[:] = NEGATIVE
        return labels, matched
    ious = bx.iou_matrix(anchors, gt)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou < neg_iou] = NEGATIVE
    pos = best_iou > pos_iou
    # rule (a): every gt claims its highest-IoU anchors, ties included
    col_max = ious.max(axis=0)
    a_idx, g_idx = np.nonzero((ious == col_max[None, :]) & (col_max[None, :] > 0))
    pos[a_idx] = True
    labels[pos] = POSITIVE
    matched[pos] = best_gt[pos]
    # an anchor forced positive by rule (a) is matched to the gt it maximizes
    for a, g in zip(a_idx, g_idx):
        if best_iou[a] <= pos_iou:
            matched[a] = g
    return labels, matched


def sample_minibatch(labels, size=256, pos_fraction=0.5, rng=None):
    """Indices of a sampled anchor minibatch, positives first then negatives."""
    if size < 1 or not 0 < pos_fraction < 1:
        raise ValueError("need size >= 1 and 0 < pos_fraction < 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == POSITIVE)
    neg = np.flatnonzero(labels == NEGATIVE)
    if len(neg) == 0:
        raise ValueError("no negative anchors available for the minibatch")
    n_pos = min(len(pos), int(size * pos_fraction))
    n_neg = min(len(neg), size - n_pos)
    pos = rng.choice(pos, n_pos, replace=False) if n_pos < len(pos) else pos
    neg = rng.choice(neg, n_neg, replace=False) if n_neg < len(neg) else neg
    return np.concatenate([np.sort(pos), np.sort(neg)]).astype(np.int64)


def rpn_loss(output: RpnOutput, labels, targets, cfg: LossConfig, batch, n_locations=None):
    """Two-term objectness + box regression loss over a sampled batch.

    ``targets`` is ``[N, 4]`` aligned with anchors (rows of non-positives are
    ignored). Returns ``(total, cls_term, reg_term, dlogits, ddeltas)`` where
    ``reg_term`` already carries the balance weight.
    """
    batch = np.asarray(batch, dtype=np.int64)
    labels = np.asarray(labels)
    n_reg = cfg.n_reg if cfg.n_reg is not None else n_locations
    if n_reg is None:
        raise ValueError("n_reg unset and number of anchor locations not supplied")
    blabels = labels[batch]
    if np.any(blabels == IGNORE):
        raise ValueError("batch contains ignored anchors")
    dlogits = np.zeros_like(output.logits)
    ddeltas = np.zeros_like(output.deltas)
    cls, g = softmax_cross_entropy(output.logits[batch], blabels, 1.0 / cfg.n_cls)
    np.add.at(dlogits, batch, g)
    pos = batch[blabels == POSITIVE]
    reg = 0.0
    if len(pos):
        if targets is None:
            raise ValueError("regression targets missing for positive anchors")
        t = np.asarray(targets, dtype=np.float64)[pos]
        if not np.all(np.isfinite(t)):
            raise ValueError("regression targets missing for positive anchors")
        w = cfg.lam / n_reg
        raw, gr = smooth_l1(output.deltas[pos] - t)
        reg = w * raw
        np.add.at(ddeltas, pos, w * gr)
    return cls + reg, cls, reg, dlogits, ddeltas


def generate_proposals(output: RpnOutput, anchors, img_w, img_h, cfg: ProposalConfig):
    """Decode, clip, filter, rank and NMS the anchors; returns ``(boxes, scores)``."""
    scores = output.scores
    # exp() guard for wild early-training deltas
    d = output.deltas.copy()
    d[:, 2:] = np.clip(d[:, 2:], -np.log(1000.0 / 16), np.log(1000.0 / 16))
    b = bx.clip_boxes(bx.decode_boxes(anchors, d), img_w, img_h)
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    keep = np.flatnonzero((w >= cfg.min_size) & (h >= cfg.min_size) & (w > 0) & (h > 0))
    b, scores = b[keep], scores[keep]
    order = bx.score_order(b, scores)[: cfg.pre_nms_top]
    b, scores = b[order], scores[order]
    kept = bx.nms(b, scores, cfg.nms_iou, cfg.post_nms_top)
    return b[kept], scores[kept]


class RPNHead:
    """3x3 conv + ReLU trunk with 1x1 objectness and delta branches."""

    def __init__(self, in_channels, k, mid_channels=16, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.k = k
        self.conv = Conv2d(in_channels, mid_channels, 3, 1, 1, rng=rng)
        self.act = ReLU()
        self.cls = Conv2d(mid_channels, 2 * k, 1, rng=rng)
        self.reg = Conv2d(mid_channels, 4 * k, 1, rng=rng)
        # output convs start near zero so early logits carry no random ranking
        for layer in (self.cls, self.reg):
            layer.weight.value[...] = rng.normal(0.0, 0.01, size=layer.weight.shape)

    def parameters(self):
        return self.conv.parameters() + self.cls.parameters() + self.reg.parameters()

    def forward(self, feat) -> RpnOutput:
        h = self.act.forward(self.conv.forward(feat))
        c = self.cls.forward(h)
        r = self.reg.forward(h)
        _, H, W = c.shape
        self._hw = (H, W)
        logits = c.reshape(self.k, 2, H, W).transpose(2, 3, 0, 1).reshape(-1, 2)
        deltas = r.reshape(self.k, 4, H, W).transpose(2, 3, 0, 1).reshape(-1, 4)
        return RpnOutput(logits, deltas)

    def backward(self, dlogits, ddeltas):
        H, W = self._hw
        dc = dlogits.reshape(H, W, self.k, 2).transpose(2, 3, 0, 1).reshape(2 * self.k, H, W)
        dr = ddeltas.reshape(H, W, self.k, 4).transpose(2, 3, 0, 1).reshape(4 * self.k, H, W)
        dh = self.cls.backward(dc) + self.reg.backward(dr)
        return self.conv.backward(self.act.backward(dh))
