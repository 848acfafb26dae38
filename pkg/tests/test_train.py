import numpy as np
import pytest

import wbcdet.train as tr
from wbcdet.data import SyntheticConfig, generate_synthetic
from wbcdet.model import FasterRCNN
from wbcdet.tensor import Parameter, sgd_update
from wbcdet.train import (DivergenceError, PretrainingError, TrainingConfig, alternating_train, patch_accuracy,
                          pretrain_backbone, transfer_learn)

TINY = TrainingConfig(max_epochs=1, rpn_batch=32, roi_batch=8, seed=4)


@pytest.fixture(scope="module")
def samples():
    cfg = SyntheticConfig(seed=2, count_range=(1, 1))
    return [generate_synthetic(cfg, i) for i in range(2)]


@pytest.fixture(scope="module")
def run(samples):
    return alternating_train(samples, TINY, FasterRCNN(TINY.model, seed=4))


def _group(m, prefix):
    return {n: p.value.tobytes() for n, p in m.named_parameters().items() if n.startswith(prefix + ".")}


def test_sgd_single_step_momentum_zero():
    p = Parameter(np.array([1.0, 2.0]))
    p.accumulate(np.array([10.0, -20.0]))
    sgd_update([p], 1e-3)
    assert np.allclose(p.value, [0.99, 2.02]) and np.all(p.grad == 0)
    q = Parameter(np.array([1.0]))
    q.frozen = True
    q.accumulate(np.array([5.0]))
    sgd_update([q], 1.0)
    assert q.value.tolist() == [1.0]


def test_learning_rate_wiring(samples, monkeypatch):
    calls = []
    real = tr.sgd_update

    def spy(params, lr, momentum=0.0):
        calls.append((len(params), lr, momentum))
        return real(params, lr, momentum)

    monkeypatch.setattr(tr, "sgd_update", spy)
    cfg = TrainingConfig(lr_rpn=3e-4, lr_cnn=2e-6, momentum=0.0, rpn_batch=32, roi_batch=8)
    m = FasterRCNN(cfg.model)
    s = samples[0]
    rng = np.random.default_rng(0)
    tr.rpn_step(m, s.image, s.gt_boxes, cfg, rng)
    n_rpn, n_bb = len(m.group("rpn")), len(m.group("backbone"))
    assert calls == [(n_rpn, 3e-4, 0.0), (n_bb, 2e-6, 0.0)]
    calls.clear()
    tr.head_step(m, s.image, s.gt_boxes + 1.0, s.gt_boxes, cfg, rng, cfg.lr_rpn)
    assert calls == [(len(m.group("head")), 3e-4, 0.0), (n_bb, 2e-6, 0.0)]


def test_step_moves_params_by_lr_times_grad(samples):
    # momentum 0, one RPN step: rpn weights move by lr_rpn * grad exactly
    cfg = TrainingConfig(momentum=0.0, rpn_batch=32)
    m = FasterRCNN(cfg.model)
    s = samples[0]
    before = m.rpn.cls.weight.value.copy()
    feat, out, labels, targets, batch, n_loc = tr._rpn_targets(m, s.image, s.gt_boxes, cfg, np.random.default_rng(1))
    _, _, _, dl, dd = tr.rpn_loss(out, labels, targets, cfg.loss, batch, n_loc)
    m.rpn.backward(dl, dd)
    g = m.rpn.cls.weight.grad.copy()
    m2 = FasterRCNN(cfg.model)
    tr.rpn_step(m2, s.image, s.gt_boxes, cfg, np.random.default_rng(1))
    assert np.allclose(m2.rpn.cls.weight.value, before - cfg.lr_rpn * g, rtol=0, atol=1e-15)


def test_stage_structure(run):
    assert [r.stage for r in run.reports] == ["stage1", "stage2", "stage3", "stage4"]
    assert all(len(r.epoch_losses) == 1 and np.isfinite(r.epoch_losses[0]) for r in run.reports)
    assert set(run.checkpoints) == {"stage1", "stage2", "stage3", "stage4"}
    rep = run.report(TINY)
    assert rep["training_config"]["max_epochs"] == 1 and len(rep["stages"]) == 4


def test_backbone_frozen_after_stage2(run):
    c = run.checkpoints
    init = FasterRCNN(TINY.model, seed=4)
    assert _group(c["stage1"], "backbone") != _group(init, "backbone")
    assert _group(c["stage2"], "backbone") == _group(c["stage3"], "backbone") == _group(c["stage4"], "backbone")
    # stage 3 tunes only the RPN head, stage 4 only the detector head
    assert _group(c["stage3"], "head") == _group(c["stage2"], "head")
    assert _group(c["stage3"], "rpn") != _group(c["stage1"], "rpn")
    assert _group(c["stage4"], "rpn") == _group(c["stage3"], "rpn")
    assert _group(c["stage4"], "head") != _group(c["stage3"], "head")
    assert run.model is c["stage4"]


def test_training_deterministic(samples, run):
    again = alternating_train(samples, TINY, FasterRCNN(TINY.model, seed=4))
    assert _group(again.model, "backbone") == _group(run.model, "backbone")
    assert {n: p.value.tobytes() for n, p in again.model.named_parameters().items()} == \
        {n: p.value.tobytes() for n, p in run.model.named_parameters().items()}
    assert [r.epoch_losses for r in again.reports] == [r.epoch_losses for r in run.reports]


def test_empty_and_mismatched_inputs(samples):
    with pytest.raises(ValueError, match="empty"):
        alternating_train([], TINY, FasterRCNN(TINY.model))
    from wbcdet.model import ModelConfig
    with pytest.raises(ValueError, match="layout"):
        alternating_train(samples, TINY, FasterRCNN(ModelConfig(hidden=8)))
    with pytest.raises(ValueError):
        TrainingConfig(max_epochs=0)
    with pytest.raises(ValueError):
        TrainingConfig(lr_rpn=0)


def test_divergence_raises(samples):
    cfg = TrainingConfig(max_epochs=3, lr_rpn=1e12, lr_cnn=1e12, rpn_batch=32, roi_batch=8)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError):
        alternating_train(samples, cfg, FasterRCNN(cfg.model))


def test_rising_loss_warns_without_stopping():
    r = tr.StageReport("s")
    for e, loss in enumerate([1, 2, 3, 4, 5, 6, 7, 1]):
        tr._check_epoch(r, e, loss, 5)
    # one warning per epoch that extends a 5-epoch rising streak
    assert len(r.epoch_losses) == 8 and [w[-3:] for w in r.warnings] == [" 5)", " 6)"]


# pretraining ----------------------------------------------------------------------


def _separable(n_images, seed):
    """Bright disc crops vs flat background crops."""
    r = np.random.default_rng(seed)
    out = []
    for _ in range(n_images):
        img = np.full((3, 32, 32), 0.9) + r.normal(0, 0.01, size=(3, 32, 32))
        cy, cx = r.integers(8, 24, size=2)
        yy, xx = np.mgrid[:32, :32]
        img[:, (yy - cy) ** 2 + (xx - cx) ** 2 <= 25] = 0.2
        boxes = np.array([[cx - 5, cy - 5, cx + 6, cy + 6],
                          [0, 0, 6, 6] if cx > 12 and cy > 12 else [26, 26, 32, 32]], dtype=float)
        out.append((img, boxes, np.array([1, 0])))
    return out


def test_pretrain_separable_set():
    cfg = TrainingConfig(pretrain_epochs=15, seed=1)
    patches = _separable(20, 0)
    m = pretrain_backbone(patches, cfg, heldout=_separable(20, 1))
    assert m.pretrain_accuracy >= 0.99 and patch_accuracy(m, patches) >= 0.99


def test_pretrain_single_example_and_seed():
    cfg = TrainingConfig(pretrain_epochs=10, seed=2)
    one = _separable(1, 3)
    a = pretrain_backbone(one, cfg)
    assert a.pretrain_accuracy == 1.0
    b = pretrain_backbone(one, cfg)
    assert _group(a, "backbone") == _group(b, "backbone")


def test_pretrain_failure_and_empty():
    with pytest.raises(ValueError):
        pretrain_backbone([], TrainingConfig())
    with pytest.raises(PretrainingError):
        pretrain_backbone(_separable(2, 0), TrainingConfig(pretrain_epochs=1), min_accuracy=1.01)


# transfer -------------------------------------------------------------------------


def test_transfer_freezes_backbone(run, samples):
    t = transfer_learn(run.model, samples, TINY)
    assert _group(t.model, "backbone") == _group(run.model, "backbone")
    assert _group(t.model, "head") != _group(run.model, "head")
    assert _group(t.model, "rpn") != _group(run.model, "rpn")
    assert [r.stage for r in t.reports] == ["transfer_rpn", "transfer_head"]
    # the source model is left untouched
    assert run.model.stage == "stage4"


def test_transfer_class_mismatch(run, samples):
    with pytest.raises(ValueError, match="classes"):
        transfer_learn(run.model, samples, TINY, num_classes=3)
    with pytest.raises(ValueError, match="empty"):
        transfer_learn(run.model, [], TINY)
