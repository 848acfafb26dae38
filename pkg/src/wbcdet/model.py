"""The assembled detector (backbone + RPN + head), inference and checkpoints."""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import boxes as bx
from .head import Detection, DetectorHead, classify_rois, roi_pool_batch
from .rpn import ProposalConfig, RPNHead, generate_proposals
from .tensor import Conv2d, MaxPool2d, Parameter, ReLU, Sequential

MAGIC = b"WBCDET-CHECKPOINT 1\n"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    feature_channels: int = 3
    pooled: int = 32
    hidden: int = 64
    num_classes: int = 2
    rpn_mid: int = 16
    scales: tuple = (16.0, 24.0, 32.0)
    ratios: tuple = (0.5, 1.0, 2.0)
    stride: int = 2

    @property
    def anchor_spec(self) -> bx.AnchorSpec:
        return bx.AnchorSpec(tuple(self.scales), tuple(self.ratios), self.stride)


def build_backbone(cfg: ModelConfig, rng) -> Sequential:
    """conv3x3(8) -> ReLU -> maxpool 2 -> conv3x3(16) -> ReLU -> conv3x3(feature_channels)."""
    return Sequential(
        Conv2d(cfg.in_channels, 8, 3, 1, 1, rng=rng),
        ReLU(),
        MaxPool2d(2),
        Conv2d(8, 16, 3, 1, 1, rng=rng),
        ReLU(),
        Conv2d(16, cfg.feature_channels, 3, 1, 1, rng=rng),
    )


@dataclass
class FasterRCNN:
    config: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    stage: str = "init"

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        c = self.config
        self.backbone = build_backbone(c, rng)
        self.rpn = RPNHead(c.feature_channels, c.anchor_spec.k, c.rpn_mid, rng=rng)
        self.head = DetectorHead(c.feature_channels * c.pooled * c.pooled, c.hidden, c.num_classes, rng=rng)
        self._anchor_cache = {}

    # parameters -----------------------------------------------------------

    def named_parameters(self):
        out = {}
        for i, layer in enumerate(self.backbone.layers):
            for pname, p in zip(("weight", "bias"), layer.parameters()):
                out[f"backbone.{i}.{pname}"] = p
        for part, layer in (("conv", self.rpn.conv), ("cls", self.rpn.cls), ("reg", self.rpn.reg)):
            out[f"rpn.{part}.weight"] = layer.weight
            out[f"rpn.{part}.bias"] = layer.bias
        for part, layer in (("fc", self.head.fc), ("cls", self.head.cls), ("reg", self.head.reg)):
            out[f"head.{part}.weight"] = layer.weight
            out[f"head.{part}.bias"] = layer.bias
        return out

    def group(self, prefix):
        return [p for n, p in self.named_parameters().items() if n.startswith(prefix + ".")]

    def copy_group_from(self, other: "FasterRCNN", prefix: str):
        mine = self.named_parameters()
        for n, p in other.named_parameters().items():
            if n.startswith(prefix + "."):
                mine[n].value[...] = p.value

    # inference ------------------------------------------------------------

    def anchors_for(self, feat_h, feat_w):
        key = (feat_h, feat_w)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = bx.generate_anchors(feat_w, feat_h, self.config.anchor_spec)
        return self._anchor_cache[key]

    def features(self, image):
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] != self.config.in_channels:
            raise ValueError(f"expected a [{self.config.in_channels},H,W] image, got shape {image.shape}")
        return self.backbone.forward(image)

    def propose(self, image, proposal_cfg: ProposalConfig):
        feat = self.features(image)
        out = self.rpn.forward(feat)
        anchors = self.anchors_for(*feat.shape[1:])
        H, W = image.shape[1:]
        boxes, scores = generate_proposals(out, anchors, W, H, proposal_cfg)
        return feat, boxes, scores

    def detect(self, image, proposal_cfg: ProposalConfig | None = None, score_threshold=0.5, final_nms_iou=0.3):
        return detect(image, self, proposal_cfg, score_threshold, final_nms_iou)


def detect(image, model: FasterRCNN, proposal_cfg: ProposalConfig | None = None,
           score_threshold: float = 0.5, final_nms_iou: float = 0.3) -> list[Detection]:
    """Full inference path; returns WBC detections ordered by probability."""
    if not isinstance(model, FasterRCNN):
        raise TypeError("detect needs a loaded FasterRCNN model")
    proposal_cfg = proposal_cfg or ProposalConfig()
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[1:]
    feat, props, _ = model.propose(image, proposal_cfg)
    if len(props) == 0:
        return []
    c = model.config
    pooled, _ = roi_pool_batch(feat, props, 1.0 / c.stride, c.pooled, with_argmax=False)
    probs, deltas = classify_rois(pooled, model.head)
    dets = []
    for cls_id in range(1, c.num_classes):
        p = probs[:, cls_id]
        b = bx.clip_boxes(bx.decode_boxes(props, np.clip(deltas[:, cls_id - 1], -4, 4)), W, H)
        ok = (p >= score_threshold) & (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1])
        b, p = b[ok], p[ok]
        for i in bx.nms(b, p, final_nms_iou):
            dets.append(Detection(tuple(float(v) for v in b[i]), float(p[i]), cls_id))
    dets.sort(key=lambda d: -d.probability)
    return dets


# checkpoints ----------------------------------------------------------------


def default_file_mode():
    mask = os.umask(0)
    os.umask(mask)
    return 0o666 & ~mask


def save_checkpoint(model: FasterRCNN, path, meta=None):
    """Write all parameters (name, shape, frozen flag, raw float64 LE bytes).

    The file is written to a temporary sibling and renamed, so a failed save
    never leaves a partial checkpoint behind.
    """
    params = model.named_parameters()
    entries = []
    offset = 0
    for name, p in params.items():
        entries.append({"name": name, "shape": list(p.shape), "frozen": bool(p.frozen), "offset": offset})
        offset += p.value.size * 8
    header = {
        "config": asdict(model.config),
        "seed": model.seed,
        "stage": model.stage,
        "meta": meta or {},
        "params": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(blob + b"\n")
            for p in params.values():
                f.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
        os.chmod(tmp, default_file_mode())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint_header(path):
    with open(path, "rb") as f:
        if f.readline() != MAGIC:
            raise CheckpointError(f"{path}: not a wbcdet checkpoint")
        return json.loads(f.readline()), f.read()


def load_checkpoint(path) -> FasterRCNN:
    header, payload = read_checkpoint_header(path)
    cfg = header["config"]
    cfg["scales"] = tuple(cfg["scales"])
    cfg["ratios"] = tuple(cfg["ratios"])
    model = FasterRCNN(ModelConfig(**cfg), seed=header["seed"], stage=header["stage"])
    params = model.named_parameters()
    names = [e["name"] for e in header["params"]]
    if sorted(names) != sorted(params):
        raise CheckpointError(f"{path}: parameter set does not match the model layout")
    for e in header["params"]:
        p: Parameter = params[e["name"]]
        if tuple(e["shape"]) != p.shape:
            raise CheckpointError(f"{path}: shape mismatch for {e['name']}")
        n = p.value.size * 8
        raw = payload[e["offset"]:e["offset"] + n]
        if len(raw) != n:
            raise CheckpointError(f"{path}: truncated payload")
        p.value[...] = np.frombuffer(raw, dtype="<f8").reshape(p.shape)
        p.frozen = bool(e["frozen"])
    model.meta = header.get("meta", {})
    return model
