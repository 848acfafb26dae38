import numpy as np
import pytest

from wbcdet.head import Detection
from wbcdet.render import YELLOW, label_region, label_text, render_annotations


@pytest.fixture
def canvas(rng):
    # no pure-yellow pixels in the background
    return rng.integers(0, 200, size=(60, 80, 3)).astype(np.uint8)


def test_label_text():
    assert label_text(0.984) == "98.4%"
    assert label_text(1.0) == "100.0%"
    assert label_text(0.9845) == "98.5%"


def test_only_perimeter_and_label_change(canvas):
    box = (20, 25, 50, 55)
    out = render_annotations(canvas, [Detection(box, 0.912)])
    assert out.shape == canvas.shape and out.dtype == np.uint8
    changed = np.any(out != canvas, axis=2)
    allowed = np.zeros_like(changed)
    allowed[25:55, 20:50] = True
    allowed[27:53, 22:48] = False  # interior beyond the 2-px border
    x0, y0, x1, y1 = label_region(box, label_text(0.912), 80, 60)
    allowed[y0:y1 + 1, x0:x1 + 1] = True
    assert not np.any(changed & ~allowed)
    assert np.all(out[changed] == YELLOW)
    # the full 2-px border is drawn
    assert np.all(out[25:27, 20:50] == YELLOW) and np.all(out[25:55, 48:50] == YELLOW)


def test_label_above_box_or_inside_at_top(canvas):
    x0, y0, x1, y1 = label_region((10, 30, 40, 50), "50.0%", 80, 60)
    assert y1 < 30
    x0, y0, x1, y1 = label_region((10, 0, 40, 20), "50.0%", 80, 60)
    assert y0 >= 2 and y1 < 20


def test_input_not_mutated_and_dicts_accepted(canvas):
    before = canvas.copy()
    a = render_annotations(canvas, [Detection((5, 5, 30, 30), 0.7)])
    b = render_annotations(canvas, [{"xmin": 5, "ymin": 5, "xmax": 30, "ymax": 30, "probability": 0.7}])
    assert np.array_equal(canvas, before) and np.array_equal(a, b)
    assert np.array_equal(render_annotations(canvas, []), canvas)


def test_box_at_image_edge(canvas):
    out = render_annotations(canvas, [Detection((70.5, 50.2, 80, 60), 0.55)])
    assert np.all(out[59, 70:80] == YELLOW)
