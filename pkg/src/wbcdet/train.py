"""Synthetic pretraining, four-stage alternating training, transfer learning."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import boxes as bx
from .data import SyntheticConfig, generate_synthetic
from .head import roi_pool_backward, roi_pool_batch
from .model import FasterRCNN, ModelConfig
from .rpn import IGNORE, POSITIVE, LossConfig, ProposalConfig, label_anchors, rpn_loss, sample_minibatch
from .tensor import reset_velocity, set_frozen, sgd_update, smooth_l1, softmax_cross_entropy

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, stage, epoch, loss):
        super().__init__(f"stage {stage} diverged at epoch {epoch}: loss={loss}")
        self.stage = stage
        self.epoch = epoch


class PretrainingError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    lr_rpn: float = 1e-4
    lr_cnn: float = 1e-5
    max_epochs: int = 15
    momentum: float = 0.9
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    rpn_batch: int = 256
    rpn_pos_fraction: float = 0.5
    roi_batch: int = 64
    roi_fg_fraction: float = 0.25
    fg_iou: float = 0.7
    bg_iou: float = 0.5
    head_reg_weight: float = 1.0
    # stages 1-4: is the shared backbone trainable?
    backbone_trainable: tuple = (True, True, False, False)
    # synthetic pretraining (stand-in for an ImageNet-pretrained model)
    pretrain_lr: float = 0.01
    pretrain_epochs: int = 12
    pretrain_images: int = 120
    pretrain_patches: int = 24
    pretrain_seed_offset: int = 100_003
    divergence_window: int = 5

    def __post_init__(self):
        if self.lr_rpn <= 0 or self.lr_cnn <= 0 or self.pretrain_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    def as_dict(self):
        return asdict(self)


@dataclass
class StageReport:
    stage: str
    epoch_losses: list = field(default_factory=list)
    seconds: float = 0.0
    warnings: list = field(default_factory=list)

    def as_dict(self, timing=False):
        d = {"stage": self.stage, "epoch_losses": self.epoch_losses, "warnings": self.warnings}
        if timing:
            d["seconds"] = self.seconds
        return d


def _check_epoch(report: StageReport, epoch, loss, window):
    if not np.isfinite(loss):
        raise DivergenceError(report.stage, epoch, loss)
    report.epoch_losses.append(float(loss))
    tail = report.epoch_losses[-(window + 1):]
    if len(tail) == window + 1 and all(b > a for a, b in zip(tail, tail[1:])):
        msg = f"loss increased for {window} consecutive epochs (epoch {epoch})"
        if msg not in report.warnings:
            report.warnings.append(msg)
            log.warning("stage %s: %s", report.stage, msg)


# ---------------------------------------------------------------------------
# pretraining


def make_patch_set(cfg: SyntheticConfig, n_images, patches_per_image, seed, start_index=0,
                   pos_iou=0.6, neg_iou=0.5):
    """Labelled crops for pretraining: ``[(image, boxes [n, 4], labels [n])]``.

    Crops overlapping a white cell at IoU >= ``pos_iou`` are label 1. Crops
    below ``neg_iou`` (background, red cells, near misses around white cells)
    are label 0.
    """
    rng = np.random.default_rng(seed)
    out = []
    W, H = cfg.width, cfg.height

    def jitter(g, shift, scale):
        w, h = g[2] - g[0], g[3] - g[1]
        cx = (g[0] + g[2]) / 2 + rng.normal(0, shift) * w
        cy = (g[1] + g[3]) / 2 + rng.normal(0, shift) * h
        w *= np.exp(rng.normal(0, scale))
        h *= np.exp(rng.normal(0, scale))
        return bx.clip_boxes([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], W, H)[0]

    for i in range(n_images):
        s = generate_synthetic(cfg, start_index + i)
        gt = s.gt_boxes
        others = np.array([o.box for o in s.annotation.objects if not o.is_wbc]).reshape(-1, 4)
        boxes, labels = [], []

        def best_iou(b):
            return bx.iou_matrix([b], gt).max() if len(gt) else 0.0

        n_pos = patches_per_image // 3 if len(gt) else 0
        while len(boxes) < n_pos:
            b = jitter(gt[rng.integers(len(gt))], 0.1, 0.12)
            if b[2] - b[0] >= 4 and b[3] - b[1] >= 4 and best_iou(b) >= pos_iou:
                boxes.append(b)
                labels.append(1)
        tries = 0
        while len(boxes) < patches_per_image and tries < 1000:
            tries += 1
            u = rng.random()
            if len(gt) and u < 0.4:
                b = jitter(gt[rng.integers(len(gt))], 0.35, 0.35)
            elif len(others) and u < 0.6:
                b = jitter(others[rng.integers(len(others))] + [-4, -4, 4, 4], 0.2, 0.3)
            else:
                w = rng.uniform(12, 36)
                h = w * np.exp(rng.normal(0, 0.3))
                cx, cy = rng.uniform(0, W), rng.uniform(0, H)
                b = bx.clip_boxes([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], W, H)[0]
            if b[2] - b[0] < 4 or b[3] - b[1] < 4 or best_iou(b) >= neg_iou:
                continue
            boxes.append(b)
            labels.append(0)
        out.append((s.image, np.array(boxes).reshape(-1, 4), np.array(labels, dtype=np.int64)))
    return out


def patch_accuracy(model: FasterRCNN, patches) -> float:
    correct = total = 0
    c = model.config
    for image, boxes, labels in patches:
        if len(boxes) == 0:
            continue
        feat = model.features(image)
        pooled, _ = roi_pool_batch(feat, boxes, 1.0 / c.stride, c.pooled)
        logits, _ = model.head.forward(pooled.reshape(len(boxes), -1))
        correct += int((logits.argmax(axis=1) == labels).sum())
        total += len(labels)
    return correct / max(total, 1)


def pretrain_backbone(patches, config: TrainingConfig, heldout=None, min_accuracy=0.6,
                      report: StageReport | None = None) -> FasterRCNN:
    """Train backbone + classifier FC layers as a cell-vs-background patch classifier.

    Returns the pretrained model; its RPN head is left at initialization.
    Raises :class:`PretrainingError` if accuracy (held-out when given, else
    training) stays below ``min_accuracy``.
    """
    if not patches:
        raise ValueError("empty pretraining patch set")
    model = FasterRCNN(config.model, seed=config.seed, stage="pretrain")
    report = report if report is not None else StageReport("pretrain")
    rng = np.random.default_rng([config.seed, 0])
    c = config.model
    params = model.group("backbone") + model.head.fc.parameters() + model.head.cls.parameters()
    t0 = time.perf_counter()
    for epoch in range(config.pretrain_epochs):
        total = 0.0
        for idx in rng.permutation(len(patches)):
            image, boxes, labels = patches[idx]
            if len(boxes) == 0:
                continue
            feat = model.backbone.forward(image)
            pooled, arg = roi_pool_batch(feat, boxes, 1.0 / c.stride, c.pooled)
            logits, deltas = model.head.forward(pooled.reshape(len(boxes), -1))
            loss, dlogits = softmax_cross_entropy(logits, labels, 1.0 / len(labels))
            dflat = model.head.backward(dlogits, np.zeros_like(deltas))
            dfeat = roi_pool_backward(dflat.reshape(pooled.shape), arg, feat.shape)
            model.backbone.backward(dfeat)
            sgd_update(params, config.pretrain_lr)
            model.head.reg.weight.zero_grad()
            model.head.reg.bias.zero_grad()
            total += loss
        _check_epoch(report, epoch, total / len(patches), config.divergence_window)
    report.seconds += time.perf_counter() - t0
    acc = patch_accuracy(model, heldout if heldout is not None else patches)
    report.warnings.append(f"patch accuracy {acc:.4f}")
    if acc < min_accuracy:
        raise PretrainingError(f"pretraining reached only {acc:.1%} patch accuracy")
    model.pretrain_accuracy = acc
    return model


# ---------------------------------------------------------------------------
# stages


def _rpn_targets(model, image, gt, config, rng):
    feat = model.backbone.forward(image)
    out = model.rpn.forward(feat)
    anchors = model.anchors_for(*feat.shape[1:])
    labels, matched = label_anchors(anchors, gt, config.pos_iou, config.neg_iou)
    targets = np.full((len(anchors), 4), np.nan)
    pos = labels == POSITIVE
    if pos.any():
        targets[pos] = bx.encode_boxes(anchors[pos], gt[matched[pos]])
    batch = sample_minibatch(labels, config.rpn_batch, config.rpn_pos_fraction, rng)
    n_loc = feat.shape[1] * feat.shape[2]
    return feat, out, labels, targets, batch, n_loc


def rpn_step(model: FasterRCNN, image, gt, config: TrainingConfig, rng, update=True):
    feat, out, labels, targets, batch, n_loc = _rpn_targets(model, image, gt, config, rng)
    total, _, _, dlogits, ddeltas = rpn_loss(out, labels, targets, config.loss, batch, n_loc)
    if update:
        dfeat = model.rpn.backward(dlogits, ddeltas)
        if not all(p.frozen for p in model.group("backbone")):
            model.backbone.backward(dfeat)
        sgd_update(model.group("rpn"), config.lr_rpn, config.momentum)
        sgd_update(model.group("backbone"), config.lr_cnn, config.momentum)
    return total


def rpn_dataset_loss(model, samples, config: TrainingConfig):
    """Mean RPN loss over ``samples`` with a fixed sampling seed (no updates)."""
    rng = np.random.default_rng([config.seed, 99])
    return float(np.mean([rpn_step(model, s.image, s.gt_boxes, config, rng, update=False) for s in samples]))


def sample_rois(proposals, gt, config: TrainingConfig, rng):
    """ROI minibatch from proposals plus ground truth; returns ``(rois, labels, targets)``."""
    rois = np.concatenate([bx.as_boxes(proposals), bx.as_boxes(gt)])
    if len(gt):
        ious = bx.iou_matrix(rois, gt)
        best = ious.argmax(axis=1)
        best_iou = ious.max(axis=1)
    else:
        best = np.zeros(len(rois), dtype=np.int64)
        best_iou = np.zeros(len(rois))
    fg = np.flatnonzero(best_iou >= config.fg_iou)
    bg = np.flatnonzero(best_iou < config.bg_iou)
    n_fg = min(len(fg), int(config.roi_batch * config.roi_fg_fraction))
    n_bg = min(len(bg), config.roi_batch - n_fg)
    fg = np.sort(rng.choice(fg, n_fg, replace=False)) if n_fg else fg[:0]
    bg = np.sort(rng.choice(bg, n_bg, replace=False)) if n_bg else bg[:0]
    keep = np.concatenate([fg, bg])
    labels = np.concatenate([np.ones(len(fg), np.int64), np.zeros(len(bg), np.int64)])
    targets = np.zeros((len(keep), 4))
    if len(fg):
        targets[: len(fg)] = bx.encode_boxes(rois[fg], gt[best[fg]])
    return rois[keep], labels, targets


def head_step(model: FasterRCNN, image, proposals, gt, config: TrainingConfig, rng, lr_head):
    c = model.config
    rois, labels, targets = sample_rois(proposals, gt, config, rng)
    if len(rois) == 0:
        return 0.0
    feat = model.backbone.forward(image)
    pooled, arg = roi_pool_batch(feat, rois, 1.0 / c.stride, c.pooled)
    R = len(rois)
    logits, deltas = model.head.forward(pooled.reshape(R, -1))
    cls, dlogits = softmax_cross_entropy(logits, labels, 1.0 / R)
    ddeltas = np.zeros_like(deltas)
    reg = 0.0
    fg = labels == 1
    if fg.any():
        raw, g = smooth_l1(deltas[fg] - targets[fg])
        w = config.head_reg_weight / R
        reg = w * raw
        ddeltas[fg] = w * g
    dflat = model.head.backward(dlogits, ddeltas)
    if not all(p.frozen for p in model.group("backbone")):
        dfeat = roi_pool_backward(dflat.reshape(pooled.shape), arg, feat.shape)
        model.backbone.backward(dfeat)
    sgd_update(model.group("head"), lr_head, config.momentum)
    sgd_update(model.group("backbone"), config.lr_cnn, config.momentum)
    return cls + reg


def _stage_rpn(model, samples, config, stage, report, rng):
    reset_velocity(model.named_parameters().values())
    t0 = time.perf_counter()
    for epoch in range(config.max_epochs):
        losses = [rpn_step(model, samples[i].image, samples[i].gt_boxes, config, rng)
                  for i in rng.permutation(len(samples))]
        _check_epoch(report, epoch, float(np.mean(losses)), config.divergence_window)
    report.seconds += time.perf_counter() - t0


def _stage_head(model, proposer, samples, config, stage, report, rng):
    reset_velocity(model.named_parameters().values())
    t0 = time.perf_counter()
    proposals = [proposer.propose(s.image, config.proposals)[1] for s in samples]
    for epoch in range(config.max_epochs):
        losses = [head_step(model, samples[i].image, proposals[i], samples[i].gt_boxes, config, rng, config.lr_rpn)
                  for i in rng.permutation(len(samples))]
        _check_epoch(report, epoch, float(np.mean(losses)), config.divergence_window)
    report.seconds += time.perf_counter() - t0


def _clone(model: FasterRCNN, stage: str) -> FasterRCNN:
    m = copy.deepcopy(model)
    m.stage = stage
    return m


@dataclass
class TrainingRun:
    model: FasterRCNN
    checkpoints: dict
    reports: list

    def report(self, config: TrainingConfig, timing=False):
        return {"training_config": config.as_dict(), "stages": [r.as_dict(timing) for r in self.reports]}


def alternating_train(samples, config: TrainingConfig, pretrained: FasterRCNN, on_checkpoint=None) -> TrainingRun:
    """Four-stage alternating schedule around a shared backbone.

    1. fine-tune RPN (+ backbone) from the pretrained model;
    2. fine-tune a separate detector network from the pretrained model on
       stage-1 proposals;
    3. take the stage-2 backbone, freeze it, tune only the RPN head;
    4. backbone still frozen, tune only the detector head.

    ``on_checkpoint(tag, model)`` is called after each stage.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("empty training set")
    if pretrained.config != config.model:
        raise ValueError("pretrained model layout does not match the training config")
    reports, ckpts = [], {}

    def emit(tag, model):
        ckpts[tag] = _clone(model, tag)
        if on_checkpoint is not None:
            on_checkpoint(tag, ckpts[tag])

    trainable = config.backbone_trainable
    # stage 1
    rpn_model = _clone(pretrained, "stage1")
    set_frozen(rpn_model.group("backbone"), not trainable[0])
    set_frozen(rpn_model.group("head"), True)
    r = StageReport("stage1")
    _stage_rpn(rpn_model, samples, config, 1, r, np.random.default_rng([config.seed, 1]))
    reports.append(r)
    emit("stage1", rpn_model)
    # stage 2
    det_model = _clone(pretrained, "stage2")
    set_frozen(det_model.group("backbone"), not trainable[1])
    set_frozen(det_model.group("rpn"), True)
    r = StageReport("stage2")
    _stage_head(det_model, rpn_model, samples, config, 2, r, np.random.default_rng([config.seed, 2]))
    reports.append(r)
    emit("stage2", det_model)
    # stage 3: shared backbone from the detector, RPN head from stage 1
    model = _clone(det_model, "stage3")
    model.copy_group_from(rpn_model, "rpn")
    set_frozen(model.group("backbone"), not trainable[2])
    set_frozen(model.group("head"), True)
    set_frozen(model.group("rpn"), False)
    r = StageReport("stage3")
    _stage_rpn(model, samples, config, 3, r, np.random.default_rng([config.seed, 3]))
    reports.append(r)
    emit("stage3", model)
    # stage 4
    model.stage = "stage4"
    set_frozen(model.group("backbone"), not trainable[3])
    set_frozen(model.group("rpn"), True)
    set_frozen(model.group("head"), False)
    r = StageReport("stage4")
    _stage_head(model, model, samples, config, 4, r, np.random.default_rng([config.seed, 4]))
    reports.append(r)
    set_frozen(model.group("rpn"), False)
    emit("stage4", model)
    return TrainingRun(ckpts["stage4"], ckpts, reports)


def transfer_learn(model: FasterRCNN, samples, config: TrainingConfig, num_classes=2, on_checkpoint=None) -> TrainingRun:
    """Frozen-backbone fine-tuning of the RPN head and detector FC layers."""
    samples = list(samples)
    if not samples:
        raise ValueError("empty training set")
    if model.config.num_classes != num_classes:
        raise ValueError(f"checkpoint head has {model.config.num_classes} classes, transfer expects {num_classes}")
    m = _clone(model, "transfer_rpn")
    set_frozen(m.group("backbone"), True)
    set_frozen(m.group("head"), True)
    set_frozen(m.group("rpn"), False)
    reports = []
    r = StageReport("transfer_rpn")
    _stage_rpn(m, samples, config, "transfer_rpn", r, np.random.default_rng([config.seed, 11]))
    reports.append(r)
    set_frozen(m.group("rpn"), True)
    set_frozen(m.group("head"), False)
    m.stage = "transfer"
    r = StageReport("transfer_head")
    _stage_head(m, m, samples, config, "transfer_head", r, np.random.default_rng([config.seed, 12]))
    reports.append(r)
    set_frozen(m.group("rpn"), False)
    out = _clone(m, "transfer")
    if on_checkpoint is not None:
        on_checkpoint("transfer", out)
    return TrainingRun(out, {"transfer": out}, reports)


def default_pretrain_set(synth: SyntheticConfig, config: TrainingConfig):
    """Pretraining and held-out patch sets drawn from a separate synthetic pool."""
    pool = replace(synth, seed=synth.seed + config.pretrain_seed_offset)
    n = config.pretrain_images
    kw = dict(pos_iou=config.fg_iou, neg_iou=config.bg_iou)
    train = make_patch_set(pool, n, config.pretrain_patches, seed=[config.seed, 5], **kw)
    held = make_patch_set(pool, max(n // 4, 1), config.pretrain_patches, seed=[config.seed, 6], start_index=n, **kw)
    return train, held
