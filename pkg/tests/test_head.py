import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import max_rel_error, numeric_grad, roi_pool_loops
from wbcdet.head import DetectorHead, classify_rois, roi_pool, roi_pool_backward, roi_pool_batch
from wbcdet.tensor import ShapeError, fully_connected, relu, softmax


def test_roi_constant_map():
    out, _ = roi_pool(np.full((2, 6, 6), 1.5), (0, 0, 10, 12), 0.5, 4)
    assert out.shape == (2, 4, 4) and np.all(out == 1.5)


def test_roi_quadrant_maxima():
    fm = np.arange(16.0).reshape(1, 4, 4)
    out, arg = roi_pool(fm, (0, 0, 4, 4), 1.0, 2)
    assert out[0].tolist() == [[5, 7], [13, 15]]
    assert arg[0].tolist() == [[5, 7], [13, 15]]


def test_roi_single_cell():
    fm = np.random.default_rng(0).normal(size=(3, 5, 5))
    out, _ = roi_pool(fm, (2.2, 1.1, 2.8, 1.9), 1.0, 4)
    assert np.all(out == fm[:, 1, 2][:, None, None])


def test_roi_outside_rejected():
    with pytest.raises(ValueError):
        roi_pool(np.zeros((1, 4, 4)), (10, 10, 20, 20), 1.0, 2)


@given(st.integers(0, 10_000), st.integers(1, 8))
def test_roi_matches_enumeration_oracle(seed, pooled):
    r = np.random.default_rng(seed)
    H, W = r.integers(2, 12, size=2)
    fm = r.normal(size=(2, H, W))
    scale = float(r.choice([0.5, 1.0, 0.25]))
    x0, y0 = r.uniform(0, W / scale - 1), r.uniform(0, H / scale - 1)
    box = (x0, y0, x0 + r.uniform(0.5, W / scale), y0 + r.uniform(0.5, H / scale))
    out, _ = roi_pool(fm, box, scale, pooled)
    assert out.shape == (2, pooled, pooled)
    assert np.array_equal(out, roi_pool_loops(fm, box, scale, pooled))


def test_roi_batch_equals_single(rng):
    fm = rng.normal(size=(3, 10, 10))
    boxes = np.array([[0, 0, 20, 20], [3.3, 4.1, 9.7, 15.2], [10, 2, 19, 8]])
    out, arg = roi_pool_batch(fm, boxes, 0.5, 5)
    for i, b in enumerate(boxes):
        o, a = roi_pool(fm, b, 0.5, 5)
        assert np.array_equal(out[i], o) and np.array_equal(arg[i], a)
    no_arg, none = roi_pool_batch(fm, boxes, 0.5, 5, with_argmax=False)
    assert none is None and np.array_equal(no_arg, out)


@pytest.mark.parametrize("seed", range(10))
def test_roi_gradient(seed):
    r = np.random.default_rng(seed)
    # distinct, well-separated values keep the argmax stable under +-h
    fm = r.permutation(2 * 8 * 8).reshape(2, 8, 8).astype(float) * 0.01
    boxes = np.array([[0, 0, 16, 16], r.uniform(0, 6, 2).tolist() + r.uniform(10, 16, 2).tolist()])
    out, arg = roi_pool_batch(fm, boxes, 0.5, 3)
    up = r.normal(size=out.shape)
    f = lambda: float((roi_pool_batch(fm, boxes, 0.5, 3)[0] * up).sum())  # noqa: E731
    assert max_rel_error(roi_pool_backward(up, arg, fm.shape), numeric_grad(f, fm)) <= 1e-4


def test_roi_backward_routes_to_argmax():
    fm = np.arange(16.0).reshape(1, 4, 4)
    out, arg = roi_pool(fm, (0, 0, 4, 4), 1.0, 2)
    d = roi_pool_backward(np.ones((1, 2, 2)), arg, fm.shape)
    assert d.sum() == 4 and d[0, 1, 1] == 1 and d[0, 3, 3] == 1 and d[0, 0, 0] == 0


def test_zero_head_uniform():
    head = DetectorHead(12, 4, 2, zero=True)
    probs, deltas = classify_rois(np.random.default_rng(0).normal(size=(3, 2, 2)), head)
    assert probs.tolist() == [0.5, 0.5] and np.all(deltas == 0) and deltas.shape == (1, 4)


def test_head_probabilities_sum_to_one(rng):
    head = DetectorHead(12, 8, 3, rng=rng)
    head.reg.weight.value[...] = rng.normal(size=head.reg.weight.shape)
    probs, deltas = classify_rois(rng.normal(size=(5, 3, 2, 2)), head)
    assert np.allclose(probs.sum(axis=1), 1, atol=1e-9) and deltas.shape == (5, 2, 4)


def test_head_matches_manual_composition(rng):
    head = DetectorHead(12, 8, 2, rng=rng)
    head.reg.weight.value[...] = rng.normal(size=head.reg.weight.shape)
    roi = rng.normal(size=(3, 2, 2))
    probs, deltas = classify_rois(roi, head)
    h = relu(fully_connected(roi.ravel(), head.fc.weight.value, head.fc.bias.value))
    p = softmax(fully_connected(h, head.cls.weight.value, head.cls.bias.value))
    d = fully_connected(h, head.reg.weight.value, head.reg.bias.value)
    assert np.allclose(probs, p, atol=1e-14) and np.allclose(deltas[0], d, atol=1e-14)


def test_head_shape_mismatch():
    with pytest.raises(ShapeError):
        classify_rois(np.zeros((3, 3, 3)), DetectorHead(12))


def test_head_backward_gradcheck(rng):
    head = DetectorHead(6, 5, 2, rng=rng)
    head.reg.weight.value[...] = rng.normal(size=head.reg.weight.shape)
    x = rng.normal(size=(3, 6))
    gl, gd = rng.normal(size=(3, 2)), rng.normal(size=(3, 4))

    def f():
        lo, de = head.forward(x)
        return float((lo * gl).sum() + (de * gd).sum())

    head.forward(x)
    dx = head.backward(gl, gd)
    assert max_rel_error(dx, numeric_grad(f, x)) <= 1e-4
