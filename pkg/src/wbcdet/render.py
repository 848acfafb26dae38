"""Draw detections: yellow 2-px rectangles with a percent label."""
from __future__ import annotations

import math

import numpy as np

from .metrics import percent

YELLOW = (255, 255, 0)
THICKNESS = 2

# 3x5 glyphs, one string per row, '#' = ink
_GLYPHS = {
    "0": ("###", "#.#", "#.#", "#.#", "###"),
    "1": (".#.", "##.", ".#.", ".#.", "###"),
    "2": ("###", "..#", "###", "#..", "###"),
    "3": ("###", "..#", "###", "..#", "###"),
    "4": ("#.#", "#.#", "###", "..#", "..#"),
    "5": ("###", "#..", "###", "..#", "###"),
    "6": ("###", "#..", "###", "#.#", "###"),
    "7": ("###", "..#", ".#.", ".#.", ".#."),
    "8": ("###", "#.#", "###", "#.#", "###"),
    "9": ("###", "#.#", "###", "..#", "###"),
    ".": ("...", "...", "...", "...", ".#."),
    "%": ("#.#", "..#", ".#.", "#..", "#.#"),
}
GLYPH_W, GLYPH_H = 3, 5


def label_text(probability: float) -> str:
    return f"{percent(probability):.1f}%"


def _pixel_rect(box, w, h):
    x0, y0, x1, y1 = box
    xa = min(max(int(math.floor(x0)), 0), w - 1)
    ya = min(max(int(math.floor(y0)), 0), h - 1)
    xb = min(max(int(math.ceil(x1)) - 1, xa), w - 1)
    yb = min(max(int(math.ceil(y1)) - 1, ya), h - 1)
    return xa, ya, xb, yb


def label_region(box, text, w, h):
    """Pixel rectangle ``(x0, y0, x1, y1)`` (inclusive) occupied by the label."""
    xa, ya, _, _ = _pixel_rect(box, w, h)
    tw = len(text) * (GLYPH_W + 1) - 1
    top = ya - GLYPH_H - 1 if ya - GLYPH_H - 1 >= 0 else ya + THICKNESS + 1
    left = min(xa, max(w - tw, 0))
    return left, top, min(left + tw - 1, w - 1), min(top + GLYPH_H - 1, h - 1)


def _draw_text(px, text, left, top):
    h, w, _ = px.shape
    x = left
    for ch in text:
        for r, row in enumerate(_GLYPHS[ch]):
            for c, cell in enumerate(row):
                yy, xx = top + r, x + c
                if cell == "#" and 0 <= yy < h and 0 <= xx < w:
                    px[yy, xx] = YELLOW
        x += GLYPH_W + 1


def render_annotations(image_bytes, detections):
    """Return a copy of an ``[H, W, 3]`` uint8 image with detections drawn."""
    px = np.array(image_bytes, dtype=np.uint8, copy=True)
    h, w, _ = px.shape
    for d in detections:
        box = d.box if hasattr(d, "box") else (d["xmin"], d["ymin"], d["xmax"], d["ymax"])
        prob = d.probability if hasattr(d, "probability") else d["probability"]
        xa, ya, xb, yb = _pixel_rect(box, w, h)
        t = min(THICKNESS, xb - xa + 1, yb - ya + 1)
        px[ya:ya + t, xa:xb + 1] = YELLOW
        px[yb - t + 1:yb + 1, xa:xb + 1] = YELLOW
        px[ya:yb + 1, xa:xa + t] = YELLOW
        px[ya:yb + 1, xb - t + 1:xb + 1] = YELLOW
        text = label_text(prob)
        left, top, _, _ = label_region(box, text, w, h)
        _draw_text(px, text, left, top)
    return px
