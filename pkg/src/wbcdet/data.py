"""Datasets: VOC XML annotations, PPM images, manifests, synthetic smears."""
from __future__ import annotations

import os
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from xml.parsers import expat

import numpy as np

FOREGROUND = "wbc"


class AnnotationError(ValueError):
    pass


class ImageLoadError(ValueError):
    pass


@dataclass(frozen=True)
class VocObject:
    name: str
    box: tuple
    difficult: bool = False

    @property
    def is_wbc(self) -> bool:
        return self.name.strip().lower() == FOREGROUND


@dataclass(frozen=True)
class Annotation:
    filename: str
    width: int
    height: int
    depth: int = 3
    objects: tuple = ()

    def wbc_boxes(self) -> np.ndarray:
        b = [o.box for o in self.objects if o.is_wbc]
        return np.array(b, dtype=np.float64).reshape(-1, 4)


@dataclass
class Sample:
    image: np.ndarray
    annotation: Annotation
    source: str = ""

    @property
    def gt_boxes(self) -> np.ndarray:
        return self.annotation.wbc_boxes()


# VOC XML ---------------------------------------------------------------------


def _parse_with_lines(text):
    parser = expat.ParserCreate()
    builder = ET.TreeBuilder()
    lines = {}

    def start(tag, attrs):
        el = builder.start(tag, attrs)
        lines[id(el)] = parser.CurrentLineNumber

    parser.StartElementHandler = start
    parser.EndElementHandler = builder.end
    parser.CharacterDataHandler = builder.data
    try:
        parser.Parse(text, True)
    except expat.ExpatError as e:
        raise AnnotationError(f"malformed XML at line {e.lineno}: {expat.ErrorString(e.code)}") from None
    return builder.close(), lines


def _number(el, tag, lines, cast=float):
    child = el.find(tag)
    if child is None or child.text is None or not child.text.strip():
        raise AnnotationError(f"missing <{tag}> in <{el.tag}> at line {lines.get(id(el), '?')}")
    try:
        v = float(child.text.strip())
    except ValueError:
        raise AnnotationError(f"non-numeric <{tag}> at line {lines.get(id(child), '?')}: {child.text!r}") from None
    if cast is int:
        if v != int(v):
            raise AnnotationError(f"non-integer <{tag}> at line {lines.get(id(child), '?')}")
        return int(v)
    return int(v) if v == int(v) else v


def parse_voc_xml(text) -> Annotation:
    """Parse a Pascal-VOC annotation document.

    Boxes marginally outside the image are clipped with a warning; boxes with
    ``xmin >= xmax`` (or ``ymin >= ymax``) are rejected.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    root, lines = _parse_with_lines(text)
    if root.tag != "annotation":
        raise AnnotationError(f"root element is <{root.tag}>, expected <annotation> (line {lines[id(root)]})")
    size = root.find("size")
    if size is None:
        raise AnnotationError(f"missing <size> element in <annotation> at line {lines[id(root)]}")
    width = _number(size, "width", lines, int)
    height = _number(size, "height", lines, int)
    depth = _number(size, "depth", lines, int) if size.find("depth") is not None else 3
    if width <= 0 or height <= 0:
        raise AnnotationError(f"non-positive image size at line {lines[id(size)]}")
    fn = root.find("filename")
    filename = fn.text if fn is not None and fn.text is not None else ""
    objects = []
    for obj in root.findall("object"):
        line = lines[id(obj)]
        name_el = obj.find("name")
        if name_el is None or name_el.text is None:
            raise AnnotationError(f"<object> without <name> at line {line}")
        bb = obj.find("bndbox")
        if bb is None:
            raise AnnotationError(f"<object> without <bndbox> at line {line}")
        coords = [_number(bb, t, lines) for t in ("xmin", "ymin", "xmax", "ymax")]
        x0, y0, x1, y1 = coords
        if x0 >= x1 or y0 >= y1:
            raise AnnotationError(
                f"degenerate <bndbox> at line {lines[id(bb)]}: xmin={x0} ymin={y0} xmax={x1} ymax={y1}")
        if x1 <= 0 or y1 <= 0 or x0 >= width or y0 >= height:
            raise AnnotationError(f"<bndbox> at line {lines[id(bb)]} lies outside the {width}x{height} image")
        clipped = (max(x0, 0), max(y0, 0), min(x1, width), min(y1, height))
        if clipped != (x0, y0, x1, y1):
            warnings.warn(f"<bndbox> at line {lines[id(bb)]} clipped to image bounds", stacklevel=2)
        diff = obj.find("difficult")
        difficult = bool(int(diff.text.strip())) if diff is not None and diff.text and diff.text.strip() else False
        objects.append(VocObject(name_el.text, tuple(clipped), difficult))
    return Annotation(filename, width, height, depth, tuple(objects))


def _fmt(v):
    if float(v) == int(v):
        return str(int(v))
    return repr(float(v))


def serialize_voc_xml(a: Annotation) -> str:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = a.filename
    size = ET.SubElement(root, "size")
    for tag, v in (("width", a.width), ("height", a.height), ("depth", a.depth)):
        ET.SubElement(size, tag).text = str(v)
    for o in a.objects:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = o.name
        ET.SubElement(obj, "difficult").text = "1" if o.difficult else "0"
        bb = ET.SubElement(obj, "bndbox")
        for tag, v in zip(("xmin", "ymin", "xmax", "ymax"), o.box):
            ET.SubElement(bb, tag).text = _fmt(v)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def read_annotation(path) -> Annotation:
    try:
        return parse_voc_xml(Path(path).read_bytes())
    except AnnotationError as e:
        raise AnnotationError(f"{path}: {e}") from None


# images ----------------------------------------------------------------------


def _pnm_header(buf):
    tokens = []
    i = 2
    while len(tokens) < 3:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace() and buf[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise ImageLoadError("truncated PNM header")
        tokens.append(int(buf[i:j]))
        i = j
    return tokens, i + 1


def decode_pnm(buf: bytes) -> np.ndarray:
    """Decode binary P6 / P5 bytes into a ``[3, H, W]`` array in [0, 1]."""
    magic = buf[:2]
    if magic not in (b"P6", b"P5"):
        raise ImageLoadError(f"unsupported PNM magic {magic!r}")
    try:
        (w, h, maxval), start = _pnm_header(buf)
    except ValueError as e:
        raise ImageLoadError(f"bad PNM header: {e}") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise ImageLoadError("bad PNM dimensions or maxval")
    ch = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * ch * dtype.itemsize
    payload = buf[start:start + need]
    if len(payload) < need:
        raise ImageLoadError(f"truncated PNM payload: {len(payload)} of {need} bytes")
    px = np.frombuffer(payload, dtype=dtype).reshape(h, w, ch).astype(np.float64) / maxval
    if ch == 1:
        px = np.repeat(px, 3, axis=2)
    return np.ascontiguousarray(px.transpose(2, 0, 1))


def load_image(path) -> np.ndarray:
    """Load an image as a ``[3, H, W]`` float array scaled to [0, 1].

    PPM/PGM are decoded natively; other formats go through Pillow when it is
    installed.
    """
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise ImageLoadError(f"{path}: {e.strerror}") from None
    if buf[:2] in (b"P6", b"P5"):
        try:
            return decode_pnm(buf)
        except ImageLoadError as e:
            raise ImageLoadError(f"{path}: {e}") from None
    try:
        from PIL import Image
    except ImportError:
        raise ImageLoadError(f"{path}: unsupported format (only binary PPM/PGM without Pillow)") from None
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except Exception as e:  # Pillow raises a zoo of types
        raise ImageLoadError(f"{path}: {e}") from None
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def to_bytes(image) -> np.ndarray:
    """``[3, H, W]`` float image -> ``[H, W, 3]`` uint8."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.rint(img * 255.0).astype(np.uint8).transpose(1, 2, 0)


def encode_ppm(image) -> bytes:
    px = to_bytes(image)
    h, w, _ = px.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def save_ppm(path, image):
    Path(path).write_bytes(encode_ppm(image))


# manifests -------------------------------------------------------------------


def read_manifest(path):
    """``(image_path, annotation_path)`` pairs; relative paths resolve against the manifest."""
    path = Path(path)
    base = path.parent
    pairs = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{n}: expected '<image>\\t<annotation>'")
        pairs.append(tuple(str(p) if os.path.isabs(p) else str(base / p) for p in parts))
    return pairs


def write_manifest(path, pairs):
    path = Path(path)
    base = path.parent.resolve()
    lines = []
    for img, ann in pairs:
        rel = [os.path.relpath(Path(p).resolve(), base) for p in (img, ann)]
        lines.append("\t".join(rel))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_sample(image_path, annotation_path) -> Sample:
    image = load_image(image_path)
    ann = read_annotation(annotation_path)
    if image.shape[1:] != (ann.height, ann.width):
        raise AnnotationError(
            f"{annotation_path}: size {ann.width}x{ann.height} does not match image {image.shape[2]}x{image.shape[1]}")
    return Sample(image, ann, str(image_path))


def load_manifest(path):
    return [load_sample(i, a) for i, a in read_manifest(path)]


def split_dataset(samples, train_count: int, seed=0):
    """Seeded shuffle split into ``(train, test)`` with ``len(train) == train_count``."""
    samples = list(samples)
    if not 0 <= train_count <= len(samples):
        raise ValueError(f"train_count {train_count} not in [0, {len(samples)}]")
    perm = np.random.default_rng(seed).permutation(len(samples))
    train = [samples[i] for i in perm[:train_count]]
    test = [samples[i] for i in perm[train_count:]]
    return train, test


# synthetic smears -------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    width: int = 64
    height: int = 64
    count_range: tuple = (1, 2)
    radius_range: tuple = (8.0, 13.0)
    distractor_range: tuple = (0, 2)
    distractor_radius: tuple = (5.0, 7.0)
    background: tuple = (0.94, 0.84, 0.84)
    cytoplasm: tuple = (0.80, 0.70, 0.90)
    nucleus: tuple = (0.36, 0.18, 0.56)
    distractor: tuple = (0.88, 0.62, 0.64)
    noise: float = 0.03
    max_overlap: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if min(self.radius_range) <= 0 or self.radius_range[0] > self.radius_range[1]:
            raise ValueError("radius range must be positive and ordered")
        if min(self.count_range) < 0 or self.count_range[0] > self.count_range[1]:
            raise ValueError("count range must be non-negative and ordered")


class SyntheticError(ValueError):
    pass


def _ellipse_mask(xx, yy, cx, cy, a, b):
    return ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0


def _place(rng, cfg, a, b, placed, tries=200):
    from .boxes import iou

    for _ in range(tries):
        cx = rng.uniform(a, cfg.width - a)
        cy = rng.uniform(b, cfg.height - b)
        box = (cx - a, cy - b, cx + a, cy + b)
        if all(iou(box, other) <= cfg.max_overlap for other in placed):
            return cx, cy, box
    return None


def generate_synthetic(cfg: SyntheticConfig, index: int) -> Sample:
    """Render smear ``index``; fully determined by ``(cfg.seed, index)``.

    White cells are axis-aligned ellipses (pale cytoplasm around a dark
    nucleus) labelled ``WBC``; optional pink discs are labelled ``RBC``.
    """
    rng = np.random.default_rng([cfg.seed, index])
    W, H = cfg.width, cfg.height
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    img = np.empty((3, H, W))
    img[:] = np.asarray(cfg.background)[:, None, None]
    n_cells = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    n_rbc = int(rng.integers(cfg.distractor_range[0], cfg.distractor_range[1] + 1))
    placed = []
    cells = []
    r_lo, r_hi = cfg.radius_range
    for _ in range(n_cells):
        a = rng.uniform(r_lo, r_hi)
        b = a * rng.uniform(0.8, 1.0)
        if rng.random() < 0.5:
            a, b = b, a
        if 2 * a > W or 2 * b > H:
            raise SyntheticError(f"cell radius {max(a, b):.1f} does not fit a {W}x{H} image")
        spot = _place(rng, cfg, a, b, placed)
        if spot is None:
            raise SyntheticError(f"cannot place {n_cells} cells of radius <= {r_hi} without exceeding "
                                 f"IoU {cfg.max_overlap}")
        cx, cy, box = spot
        placed.append(box)
        cells.append((cx, cy, a, b))
    rbcs = []
    for _ in range(n_rbc):
        r = rng.uniform(*cfg.distractor_radius)
        spot = _place(rng, cfg, r, r, placed, tries=50)
        if spot is not None:
            placed.append(spot[2])
            rbcs.append((spot[0], spot[1], r))
    for cx, cy, r in rbcs:
        m = _ellipse_mask(xx, yy, cx, cy, r, r)
        shade = 1.0 - 0.05 * (((xx - cx) ** 2 + (yy - cy) ** 2) < (0.5 * r) ** 2)
        for c in range(3):
            img[c][m] = (cfg.distractor[c] * shade)[m]
    objects = []
    for cx, cy, a, b in cells:
        m = _ellipse_mask(xx, yy, cx, cy, a, b)
        for c in range(3):
            img[c][m] = cfg.cytoplasm[c]
        for _ in range(int(rng.integers(1, 4))):
            rn = min(a, b) * rng.uniform(0.3, 0.5)
            ox = rng.uniform(-0.3, 0.3) * a
            oy = rng.uniform(-0.3, 0.3) * b
            mn = _ellipse_mask(xx, yy, cx + ox, cy + oy, rn, rn * rng.uniform(0.8, 1.2)) & m
            for c in range(3):
                img[c][mn] = cfg.nucleus[c]
        objects.append(VocObject("WBC", (cx - a, cy - b, cx + a, cy + b), False))
    for cx, cy, r in rbcs:
        objects.append(VocObject("RBC", (cx - r, cy - r, cx + r, cy + r), False))
    img += rng.normal(0.0, cfg.noise, size=img.shape)
    # quantize so the in-memory sample equals its PPM round trip
    img = np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    name = f"synth_{cfg.seed}_{index:05d}"
    ann = Annotation(name + ".ppm", W, H, 3, tuple(objects))
    return Sample(img, ann, name)


def write_sample(sample: Sample, out_dir, stem=None):
    out_dir = Path(out_dir)
    stem = stem or Path(sample.annotation.filename).stem
    img_path = out_dir / f"{stem}.ppm"
    ann_path = out_dir / f"{stem}.xml"
    save_ppm(img_path, sample.image)
    ann_path.write_text(serialize_voc_xml(sample.annotation), encoding="utf-8")
    return img_path, ann_path
