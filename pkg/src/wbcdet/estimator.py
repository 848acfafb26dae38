"""scikit-learn style wrapper around pretraining, alternating training and detection."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import Annotation, Sample, SyntheticConfig, VocObject
from .metrics import compute_metrics, count_cells, match_detections
from .model import FasterRCNN, detect
from .rpn import ProposalConfig
from .train import TrainingConfig, alternating_train, default_pretrain_set, pretrain_backbone, transfer_learn


def check_image(image, channels=3):
    """Return ``image`` as a float ``[C, H, W]`` array with values in [0, 1]."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim != 3 or a.shape[0] != channels:
        raise ValueError(f"expected a [{channels}, H, W] image, got shape {a.shape}")
    if a.shape[1] < 2 or a.shape[2] < 2:
        raise ValueError(f"image too small: {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("image contains NaN or inf")
    return a


def check_boxes(boxes, width, height):
    """Validate ground-truth boxes ``[n, 4]`` against an image size."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) if len(boxes) else np.zeros((0, 4))
    if not np.all(np.isfinite(b)):
        raise ValueError("boxes contain NaN or inf")
    if np.any(b[:, 2] <= b[:, 0]) or np.any(b[:, 3] <= b[:, 1]):
        raise ValueError("boxes need xmax > xmin and ymax > ymin")
    if np.any(b[:, :2] < 0) or np.any(b[:, 2] > width) or np.any(b[:, 3] > height):
        raise ValueError("boxes extend outside the image")
    return b


def check_dataset(X, y=None):
    """Turn ``(images, boxes per image)`` into a list of :class:`Sample`."""
    if len(X) == 0:
        raise ValueError("empty dataset")
    if y is not None and len(y) != len(X):
        raise ValueError(f"{len(X)} images but {len(y)} box lists")
    out = []
    for i, img in enumerate(X):
        if isinstance(img, Sample):
            out.append(img)
            continue
        img = check_image(img)
        _, h, w = img.shape
        b = check_boxes(y[i] if y is not None else [], w, h)
        ann = Annotation(f"{i:06d}.ppm", w, h, 3, tuple(VocObject("WBC", tuple(map(float, r))) for r in b))
        out.append(Sample(img, ann, f"<array {i}>"))
    return out


class WBCDetector(BaseEstimator):
    """White-blood-cell detector and counter.

    ``fit`` pretrains the backbone on a synthetic patch pool and then runs the
    four-stage alternating schedule. ``predict`` returns one list of
    :class:`~wbcdet.head.Detection` per image.
    """

    def __init__(self, lr_rpn=1e-4, lr_cnn=1e-5, max_epochs=15, momentum=0.9, seed=0,
                 score_threshold=0.5, nms_iou=0.3, match_iou=0.5, synthetic_seed=None):
        self.lr_rpn = lr_rpn
        self.lr_cnn = lr_cnn
        self.max_epochs = max_epochs
        self.momentum = momentum
        self.seed = seed
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou
        self.match_iou = match_iou
        self.synthetic_seed = synthetic_seed

    def _training_config(self):
        return TrainingConfig(lr_rpn=self.lr_rpn, lr_cnn=self.lr_cnn, max_epochs=self.max_epochs,
                              momentum=self.momentum, seed=self.seed)

    def fit(self, X, y=None):
        samples = check_dataset(X, y)
        cfg = self._training_config()
        seed = self.seed if self.synthetic_seed is None else self.synthetic_seed
        patches, held = default_pretrain_set(SyntheticConfig(seed=seed), cfg)
        pre = pretrain_backbone(patches, cfg, heldout=held)
        run = alternating_train(samples, cfg, pre)
        self.model_ = run.model
        self.pretrain_accuracy_ = pre.pretrain_accuracy
        self.training_report_ = run.report(cfg)
        return self

    def fit_transfer(self, X, y=None, model: FasterRCNN | None = None):
        """Frozen-backbone fine-tuning starting from ``model`` (or the fitted one)."""
        base = model if model is not None else getattr(self, "model_", None)
        if base is None:
            raise ValueError("fit_transfer needs a starting model")
        cfg = self._training_config()
        run = transfer_learn(base, check_dataset(X, y), cfg)
        self.model_ = run.model
        self.training_report_ = run.report(cfg)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return [detect(s.image, self.model_, ProposalConfig(), self.score_threshold, self.nms_iou)
                for s in check_dataset(X)]

    def count(self, X):
        counts, _ = count_cells(self.predict(X))
        return np.asarray(counts)

    def evaluate(self, X, y=None):
        samples = check_dataset(X, y)
        dets = self.predict(samples)
        return compute_metrics([match_detections(d, s.gt_boxes, self.match_iou) for d, s in zip(dets, samples)])

    def score(self, X, y=None):
        """Overall accuracy (gt - FN - FP) / gt, floored at zero."""
        return self.evaluate(X, y).accuracy
