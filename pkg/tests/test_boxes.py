import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import iou_pixels, iou_scalar, nms_greedy
from wbcdet import boxes as bx


def _box(draw, lo=0, hi=50):
    x0 = draw(st.integers(lo, hi - 1))
    y0 = draw(st.integers(lo, hi - 1))
    return (x0, y0, draw(st.integers(x0 + 1, hi)), draw(st.integers(y0 + 1, hi)))


int_boxes = st.composite(_box)()


def test_iou_examples():
    assert bx.iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert bx.iou((0, 0, 10, 10), (20, 20, 30, 30)) == 0.0
    assert bx.iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)


@given(int_boxes, int_boxes)
def test_iou_properties(a, b):
    v = bx.iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == bx.iou(b, a)
    assert (v == 1.0) == (a == b)
    interiors_disjoint = a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]
    assert (v == 0.0) == interiors_disjoint


@given(int_boxes, int_boxes)
def test_iou_pixel_oracle(a, b):
    assert abs(bx.iou(a, b) - iou_pixels(a, b)) <= 0.02


def test_iou_matrix_matches_scalar(rng):
    a = rng.uniform(0, 40, size=(7, 2))
    a = np.hstack([a, a + rng.uniform(1, 20, size=(7, 2))])
    b = rng.uniform(0, 40, size=(5, 2))
    b = np.hstack([b, b + rng.uniform(1, 20, size=(5, 2))])
    m = bx.iou_matrix(a, b)
    for i in range(7):
        for j in range(5):
            assert m[i, j] == pytest.approx(iou_scalar(a[i], b[j]), abs=1e-14)


# anchors -------------------------------------------------------------------------


def test_anchor_examples():
    spec = bx.AnchorSpec()
    assert len(bx.generate_anchors(1, 1, spec)) == 9
    assert len(bx.generate_anchors(2, 2, spec)) == 36
    single = bx.generate_anchors(1, 1, bx.AnchorSpec((20.0,), (1.0,), 16))
    assert single.tolist() == [[-2.0, -2.0, 18.0, 18.0]]  # side 20 centred at (8, 8)


def test_anchor_shapes_preserve_area():
    spec = bx.AnchorSpec()
    a = bx.base_anchors(spec)
    w = a[:, 2] - a[:, 0]
    h = a[:, 3] - a[:, 1]
    for (s, r), wi, hi in zip([(s, r) for s in spec.scales for r in spec.ratios], w, h):
        assert wi == pytest.approx(s * math.sqrt(r))
        assert hi == pytest.approx(s / math.sqrt(r))
        assert wi * hi == pytest.approx(s * s)


@given(st.integers(1, 20), st.integers(1, 20),
       st.lists(st.floats(2, 64), min_size=1, max_size=4), st.lists(st.floats(0.25, 4), min_size=1, max_size=4),
       st.integers(1, 16))
def test_anchor_count_law(w, h, scales, ratios, stride):
    spec = bx.AnchorSpec(tuple(scales), tuple(ratios), stride)
    assert len(bx.generate_anchors(w, h, spec)) == w * h * len(scales) * len(ratios)


def test_anchor_translation_invariance():
    spec = bx.AnchorSpec()
    W, H = 7, 5
    a = bx.generate_anchors(W, H, spec).reshape(H, W, spec.k, 4)
    shift_x = np.array([spec.stride, 0, spec.stride, 0])
    shift_y = np.array([0, spec.stride, 0, spec.stride])
    assert np.array_equal(a[:, 1:], a[:, :-1] + shift_x)
    assert np.array_equal(a[1:], a[:-1] + shift_y)


def test_anchor_empty_spec_rejected():
    with pytest.raises(ValueError):
        bx.generate_anchors(2, 2, bx.AnchorSpec((), (1.0,), 2))
    with pytest.raises(ValueError):
        bx.generate_anchors(2, 2, bx.AnchorSpec((8.0,), (), 2))


# encode / decode ----------------------------------------------------------------


def test_encode_decode_examples():
    assert bx.encode_box((0, 0, 10, 10), (0, 0, 10, 10)) == pytest.approx((0, 0, 0, 0))
    t = bx.encode_box((0, 0, 10, 10), (0, 0, 20, 20))
    assert t == pytest.approx((0.5, 0.5, math.log(2), math.log(2)), abs=1e-15)
    assert bx.decode_box((0, 0, 10, 10), (0, 0, 0, 0)) == pytest.approx((0, 0, 10, 10))
    assert bx.decode_box((0, 0, 10, 10), (0.5, 0.5, math.log(2), math.log(2))) == pytest.approx((0, 0, 20, 20))


def test_encode_decode_roundtrip_1000(rng):
    def boxes(n):
        p = rng.uniform(-100, 100, size=(n, 2))
        return np.hstack([p, p + rng.uniform(0.5, 80, size=(n, 2))])

    a, g = boxes(1000), boxes(1000)
    back = bx.decode_boxes(a, bx.encode_boxes(a, g))
    assert np.abs(back - g).max() < 1e-9


# clipping -----------------------------------------------------------------------


def test_clip_examples():
    assert bx.clip_box((10, 10, 20, 20), 100, 100) == (10, 10, 20, 20)
    assert bx.clip_box((-5, -5, 5, 5), 100, 100) == (0, 0, 5, 5)
    assert bx.clip_box((200, 200, 300, 300), 100, 100) is None


# NMS ------------------------------------------------------------------------------


def test_nms_examples():
    assert bx.nms(np.zeros((0, 4)), np.zeros(0), 0.5).tolist() == []
    assert bx.nms([(0, 0, 5, 5)], [0.3], 0.5).tolist() == [0]
    # IoU of these two is 0.8
    a, b = (0, 0, 10, 10), (0, 0, 10, 8)
    assert bx.iou(a, b) == pytest.approx(0.8)
    assert bx.nms([a, b], [0.9, 0.7], 0.7).tolist() == [0]


def test_nms_tie_rule():
    boxes = [(5, 0, 10, 10), (0, 3, 4, 9), (0, 1, 4, 9), (20, 20, 30, 30)]
    assert bx.nms(boxes, [0.5, 0.5, 0.5, 0.5], 0.99).tolist() == [2, 1, 0, 3]


def _random_set(r, n):
    p = r.uniform(0, 40, size=(n, 2))
    b = np.hstack([p, p + r.uniform(2, 25, size=(n, 2))])
    # some duplicated scores exercise the tie rule
    s = r.choice(np.round(r.uniform(0, 1, size=max(n // 2, 1)), 2), size=n)
    return b, s


def test_nms_matches_bruteforce_1000_sets():
    r = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(r.integers(0, 51))
        b, s = _random_set(r, n)
        thr = float(r.uniform(0.1, 0.9))
        keep_k = None if r.random() < 0.5 else int(r.integers(0, 20))
        got = bx.nms(b, s, thr, keep_k).tolist()
        assert got == nms_greedy(b.tolist(), s.tolist(), thr, keep_k)


@given(st.integers(0, 10_000), st.floats(0.05, 1.0), st.integers(0, 30))
def test_nms_output_properties(seed, thr, max_keep):
    r = np.random.default_rng(seed)
    b, s = _random_set(r, int(r.integers(0, 40)))
    keep = bx.nms(b, s, thr, max_keep)
    assert len(keep) <= max_keep
    assert list(s[keep]) == sorted(s[keep], reverse=True)
    for i in range(len(keep)):
        for j in range(i + 1, len(keep)):
            assert bx.iou(b[keep[i]], b[keep[j]]) <= thr
