"""Command-line interface: synth, pretrain, train, transfer, detect, evaluate, count."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import fields
from pathlib import Path

from .data import (SyntheticConfig, generate_synthetic, load_image, load_manifest, read_annotation, read_manifest,
                   save_ppm, split_dataset, to_bytes, write_manifest, write_sample)
from .metrics import MatchResult, compute_metrics, count_cells, match_detections
from .model import CheckpointError, default_file_mode, detect, load_checkpoint, save_checkpoint
from .render import render_annotations
from .rpn import LossConfig, ProposalConfig
from .train import TrainingConfig, TrainingError, alternating_train, default_pretrain_set, pretrain_backbone, transfer_learn

log = logging.getLogger("wbcdet")

DETECTIONS_FORMAT = "wbcdet-detections/1"

# config-file keys that are not TrainingConfig fields
_EXTRA_KEYS = {
    "seed": 0,
    "n": 364,
    "train_count": None,
    "score_threshold": 0.5,
    "iou_threshold": None,
    "synthetic_seed": None,
    "num_classes": 2,
}
_SYNTH_PREFIX = "synth."
_PROPOSAL_PREFIX = "proposals."
_LOSS_PREFIX = "loss."


class CliError(Exception):
    pass


# config ---------------------------------------------------------------------


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config(path):
    """Flat ``key = value`` file; ``#`` starts a comment. Values are JSON when they parse as JSON."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _parse_value(value)
    return out


def _check_keys(cfg):
    train_keys = {f.name for f in fields(TrainingConfig)} - {"model", "loss", "proposals", "seed"}
    synth_keys = {f.name for f in fields(SyntheticConfig)} - {"seed"}
    prop_keys = {f.name for f in fields(ProposalConfig)}
    loss_keys = {f.name for f in fields(LossConfig)}
    for key in cfg:
        if key in train_keys or key in _EXTRA_KEYS:
            continue
        for prefix, allowed in ((_SYNTH_PREFIX, synth_keys), (_PROPOSAL_PREFIX, prop_keys), (_LOSS_PREFIX, loss_keys)):
            if key.startswith(prefix) and key[len(prefix):] in allowed:
                break
        else:
            raise CliError(f"unknown config key: {key}")


def effective_config(args):
    """Merge built-in defaults, the config file and command-line flags (in rising priority)."""
    cfg = dict(_EXTRA_KEYS)
    if getattr(args, "config", None):
        file_cfg = read_config(args.config)
        _check_keys(file_cfg)
        cfg.update(file_cfg)
    for key in ("seed", "n", "train_count", "score_threshold", "iou_threshold", "num_classes"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if cfg["synthetic_seed"] is None:
        cfg["synthetic_seed"] = cfg["seed"]
    return cfg


def _sub(cfg, prefix):
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def _tuples(d):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def training_config(cfg) -> TrainingConfig:
    names = {f.name for f in fields(TrainingConfig)}
    kw = _tuples({k: v for k, v in cfg.items() if k in names})
    kw["seed"] = int(cfg["seed"])
    kw["loss"] = LossConfig(**_sub(cfg, _LOSS_PREFIX))
    kw["proposals"] = ProposalConfig(**_sub(cfg, _PROPOSAL_PREFIX))
    return TrainingConfig(**kw)


def synthetic_config(cfg, seed) -> SyntheticConfig:
    return SyntheticConfig(**_tuples(_sub(cfg, _SYNTH_PREFIX)), seed=int(seed))


# output helpers ---------------------------------------------------------------


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.chmod(tmp, default_file_mode())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _out_dir(args):
    if not args.out:
        raise CliError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what):
    if not path:
        raise CliError(f"{what} is required")
    if not Path(path).is_file():
        raise CliError(f"{what}: no such file: {path}")
    return path


def _write_run_report(out, name, cfg, payload, timing):
    report = {"command": name, "effective_config": cfg}
    report.update(payload)
    write_json(out / "report.json", report)
    # wall-clock numbers live in a sidecar so the report itself is reproducible
    write_json(out / "timing.json", timing)


def _load_model(path):
    _require(path, "--checkpoint")
    return load_checkpoint(path)


# subcommands --------------------------------------------------------------------


def cmd_synth(args, cfg):
    out = _out_dir(args)
    syn = synthetic_config(cfg, cfg["seed"])
    pairs = []
    for i in range(int(cfg["n"])):
        pairs.append(write_sample(generate_synthetic(syn, i), out, f"synth_{i:04d}"))
    write_manifest(out / "manifest.txt", pairs)
    write_json(out / "report.json", {"command": "synth", "effective_config": cfg, "images": len(pairs)})
    print(f"wrote {len(pairs)} samples to {out}")


def _pretrain(cfg, tcfg):
    syn = synthetic_config(cfg, cfg["synthetic_seed"])
    patches, held = default_pretrain_set(syn, tcfg)
    return pretrain_backbone(patches, tcfg, heldout=held)


def cmd_pretrain(args, cfg):
    out = _out_dir(args)
    tcfg = training_config(cfg)
    t0 = time.perf_counter()
    model = _pretrain(cfg, tcfg)
    secs = time.perf_counter() - t0
    save_checkpoint(model, out / "pretrained.ckpt", {"pretrain_accuracy": model.pretrain_accuracy})
    _write_run_report(out, "pretrain", cfg, {"training_config": tcfg.as_dict(),
                                             "pretrain_accuracy": model.pretrain_accuracy},
                      {"pretrain_seconds": secs})
    print(f"pretraining patch accuracy {model.pretrain_accuracy:.4f}")


def cmd_train(args, cfg):
    out = _out_dir(args)
    manifest = _require(args.manifest, "--manifest")
    tcfg = training_config(cfg)
    pairs = read_manifest(manifest)
    timing = {}
    if cfg["train_count"] is not None:
        idx = list(range(len(pairs)))
        tr, te = split_dataset(idx, int(cfg["train_count"]), int(cfg["seed"]))
        write_manifest(out / "train.txt", [pairs[i] for i in tr])
        write_manifest(out / "test.txt", [pairs[i] for i in te])
        samples = load_manifest(out / "train.txt")
    else:
        samples = load_manifest(manifest)
    if args.checkpoint:
        pre = _load_model(args.checkpoint)
    else:
        t0 = time.perf_counter()
        pre = _pretrain(cfg, tcfg)
        timing["pretrain_seconds"] = time.perf_counter() - t0
        save_checkpoint(pre, out / "pretrained.ckpt", {"pretrain_accuracy": pre.pretrain_accuracy})
    t0 = time.perf_counter()
    run = alternating_train(samples, tcfg, pre,
                            on_checkpoint=lambda tag, m: save_checkpoint(m, out / f"{tag}.ckpt"))
    timing["train_seconds"] = time.perf_counter() - t0
    timing["stages"] = {r.stage: r.seconds for r in run.reports}
    save_checkpoint(run.model, out / "model.ckpt")
    _write_run_report(out, "train", cfg, run.report(tcfg) | {"train_images": len(samples)}, timing)
    print(f"trained on {len(samples)} images; final checkpoint {out / 'model.ckpt'}")


def cmd_transfer(args, cfg):
    out = _out_dir(args)
    samples = load_manifest(_require(args.manifest, "--manifest"))
    model = _load_model(args.checkpoint)
    tcfg = training_config(cfg)
    t0 = time.perf_counter()
    run = transfer_learn(model, samples, tcfg, num_classes=int(cfg["num_classes"]))
    secs = time.perf_counter() - t0
    save_checkpoint(run.model, out / "transfer.ckpt")
    _write_run_report(out, "transfer", cfg, run.report(tcfg) | {"train_images": len(samples)},
                      {"transfer_seconds": secs})
    print(f"transfer-trained on {len(samples)} images")


def _detections_doc(model, pairs, cfg, render_dir=None):
    images = []
    nms_iou = 0.3 if cfg["iou_threshold"] is None else float(cfg["iou_threshold"])
    proposals = ProposalConfig(**_sub(cfg, _PROPOSAL_PREFIX))
    for img_path, _ in pairs:
        image = load_image(img_path)
        dets = detect(image, model, proposals, float(cfg["score_threshold"]), nms_iou)
        images.append({"filename": Path(img_path).name, "detections": [d.as_dict() for d in dets]})
        if render_dir is not None:
            drawn = render_annotations(to_bytes(image), dets)
            save_ppm(render_dir / (Path(img_path).stem + ".ppm"), drawn.transpose(2, 0, 1) / 255.0)
    return {"format": DETECTIONS_FORMAT, "images": images}


def cmd_detect(args, cfg):
    out = _out_dir(args)
    pairs = read_manifest(_require(args.manifest, "--manifest"))
    model = _load_model(args.checkpoint)
    render_dir = out / "rendered" if args.render else None
    if render_dir is not None:
        render_dir.mkdir(exist_ok=True)
    doc = _detections_doc(model, pairs, cfg, render_dir)
    doc["effective_config"] = cfg
    write_json(out / "detections.json", doc)
    n = sum(len(r["detections"]) for r in doc["images"])
    print(f"{n} detections in {len(pairs)} images")


def read_detections(path):
    doc = json.loads(Path(_require(path, "--detections")).read_text(encoding="utf-8"))
    if isinstance(doc, dict):
        if doc.get("format", DETECTIONS_FORMAT) != DETECTIONS_FORMAT:
            raise CliError(f"{path}: unsupported detections format {doc.get('format')!r}")
        doc = doc.get("images")
    if not isinstance(doc, list):
        raise CliError(f"{path}: expected a list of per-image records")
    for rec in doc:
        if "filename" not in rec or not isinstance(rec.get("detections"), list):
            raise CliError(f"{path}: each record needs 'filename' and a 'detections' array")
    return doc


def read_matches(path):
    """Per-image ``{tp, fp, fn}`` records (a list, or ``{"images": [...]}``)."""
    doc = json.loads(Path(_require(path, "--matches")).read_text(encoding="utf-8"))
    if isinstance(doc, dict):
        doc = doc.get("images")
    if not isinstance(doc, list):
        raise CliError(f"{path}: expected a list of per-image match records")
    out = []
    for i, r in enumerate(doc):
        try:
            tp, fp, fn = (int(r[k]) for k in ("tp", "fp", "fn"))
        except (KeyError, TypeError, ValueError):
            raise CliError(f"{path}: record {i} needs integer tp, fp, fn") from None
        if min(tp, fp, fn) < 0:
            raise CliError(f"{path}: record {i} has a negative count")
        out.append(MatchResult(tp, fp, fn))
    return out


def cmd_evaluate(args, cfg):
    out = _out_dir(args)
    if args.matches:
        results = read_matches(args.matches)
    else:
        pairs = read_manifest(_require(args.manifest, "--manifest"))
        if args.detections:
            records = read_detections(args.detections)
        else:
            model = _load_model(args.checkpoint)
            records = _detections_doc(model, pairs, {**cfg, "iou_threshold": None})["images"]
        by_name = {r["filename"]: r["detections"] for r in records}
        match_iou = 0.5 if cfg["iou_threshold"] is None else float(cfg["iou_threshold"])
        results = []
        for img_path, ann_path in pairs:
            name = Path(img_path).name
            if name not in by_name:
                raise CliError(f"no detections record for {name}")
            results.append(match_detections(by_name[name], read_annotation(ann_path).wbc_boxes(), match_iou))
    report = compute_metrics(results)
    doc = report.as_dict()
    doc["effective_config"] = cfg
    write_json(out / "metrics.json", doc)
    _atomic_write(out / "metrics.txt", report.table().encode("utf-8"))
    print(report.table(), end="")


def cmd_count(args, cfg):
    out = _out_dir(args)
    if args.detections:
        records = read_detections(args.detections)
    else:
        pairs = read_manifest(_require(args.manifest, "--manifest"))
        records = _detections_doc(_load_model(args.checkpoint), pairs, cfg)["images"]
    counts, total = count_cells([r["detections"] for r in records])
    doc = {"images": [{"filename": r["filename"], "count": c} for r, c in zip(records, counts)],
           "total": total, "effective_config": cfg}
    write_json(out / "counts.json", doc)
    print(f"{total} white blood cells in {len(records)} images")


# parser -------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="wbcdet", description="White-blood-cell detection and counting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *extra):
        sp.add_argument("--config", help="flat key = value config file (flags override it)")
        sp.add_argument("--seed", type=int, help="random seed (default 0)")
        sp.add_argument("--out", help="output directory")
        for name in extra:
            if name == "manifest":
                sp.add_argument("--manifest", help="tab-separated image/annotation manifest")
            elif name == "checkpoint":
                sp.add_argument("--checkpoint", help="model checkpoint to load")
            elif name == "thresholds":
                sp.add_argument("--score-threshold", dest="score_threshold", type=float,
                                help="minimum WBC probability kept (default 0.5)")
                sp.add_argument("--iou-threshold", dest="iou_threshold", type=float,
                                help="final NMS IoU for detect/count (default 0.3); "
                                     "matching IoU for evaluate (default 0.5)")
            elif name == "render":
                sp.add_argument("--render", action="store_true", help="also write annotated PPM images")
        return sp

    sp = common(sub.add_parser("synth", help="generate a synthetic smear dataset"))
    sp.add_argument("--n", type=int, help="number of images (default 364)")
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("pretrain", help="synthetic patch pretraining of the backbone"))
    sp.set_defaults(func=cmd_pretrain)

    sp = common(sub.add_parser("train", help="four-stage alternating training"), "manifest", "checkpoint")
    sp.add_argument("--train-count", dest="train_count", type=int,
                    help="split the manifest, train on this many images, write train.txt/test.txt")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("transfer", help="frozen-backbone fine-tuning from a checkpoint"),
                "manifest", "checkpoint")
    sp.add_argument("--num-classes", dest="num_classes", type=int, help="expected class count (default 2)")
    sp.set_defaults(func=cmd_transfer)

    sp = common(sub.add_parser("detect", help="detect WBCs in every manifest image"),
                "manifest", "checkpoint", "thresholds", "render")
    sp.set_defaults(func=cmd_detect)

    sp = common(sub.add_parser("evaluate", help="FP / FN / miss rate / accuracy"),
                "manifest", "checkpoint", "thresholds")
    sp.add_argument("--detections", help="detections document from 'detect'")
    sp.add_argument("--matches", help="per-image {tp, fp, fn} records instead of detections")
    sp.set_defaults(func=cmd_evaluate)

    sp = common(sub.add_parser("count", help="per-image WBC counts"), "manifest", "checkpoint", "thresholds")
    sp.add_argument("--detections", help="detections document from 'detect'")
    sp.set_defaults(func=cmd_count)
    return p


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        args.func(args, cfg)
    except (CliError, CheckpointError, TrainingError, ValueError, KeyError, OSError) as e:
        print(f"wbcdet {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
