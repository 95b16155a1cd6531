"""Seeded procedural rasterizer for synthetic UML diagrams and a dissimilar shape corpus.

Every scene is a pure function of ``(kind, seed)`` and is rendered on a
256x256 white grayscale canvas with integer (Bresenham / midpoint /
scanline) rasterization, then resampled to the requested canvas.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import DatasetManifest, Image, ManifestRow, bilinear_resize, box_downsample, write_pnm
from .tensor import SeededRng, child_seed

BASE = 256
WHITE = 255
DASH_ON, DASH_OFF = 4, 4

UML_CLASSES = ("class", "sequence")
SHAPE_CLASSES = ("circles", "triangles", "checker", "polylines")
SCENE_KINDS = ("uml-class", "uml-sequence", "source-shapes")


@dataclass
class Element:
    kind: str
    geom: tuple
    value: int = 0
    width: int = 1


@dataclass
class SceneSpec:
    kind: str
    seed: int
    elements: list[Element] = field(default_factory=list)
    height: int = BASE
    width: int = BASE
    noise: float = 0.01
    stroke_value: int = 0
    stroke_width: int = 1
    label: int = 0

    def of_kind(self, kind: str) -> list[Element]:
        return [e for e in self.elements if e.kind == kind]


# --------------------------------------------------------------------------
# raster primitives
# --------------------------------------------------------------------------

def bresenham(x0: int, y0: int, x1: int, y1: int):
    """Integer points of the segment, endpoints included."""
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    pts = []
    while True:
        pts.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pts
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


class Raster:
    def __init__(self, h: int = BASE, w: int = BASE):
        self.a = np.full((h, w), WHITE, dtype=np.uint8)

    def _plot(self, x, y, v):
        h, w = self.a.shape
        if 0 <= x < w and 0 <= y < h:
            self.a[y, x] = v

    def line(self, x0, y0, x1, y1, v, width=1, dashed=False):
        pts = bresenham(x0, y0, x1, y1)
        steep = abs(y1 - y0) > abs(x1 - x0)
        for i, (x, y) in enumerate(pts):
            if dashed and i % (DASH_ON + DASH_OFF) >= DASH_ON:
                continue
            self._plot(x, y, v)
            if width > 1:
                if steep:
                    self._plot(x + 1, y, v)
                else:
                    self._plot(x, y + 1, v)

    def rect(self, x0, y0, x1, y1, v, width=1, fill=None):
        if fill is not None:
            self.a[y0:y1 + 1, x0:x1 + 1] = fill
        for t in range(width):
            self.a[y0 + t, x0:x1 + 1] = v
            self.a[y1 - t, x0:x1 + 1] = v
            self.a[y0:y1 + 1, x0 + t] = v
            self.a[y0:y1 + 1, x1 - t] = v

    def hline(self, x0, x1, y, v, width=1):
        for t in range(width):
            self.a[y + t, x0:x1 + 1] = v

    def circle(self, cx, cy, r, v, width=1):
        for rr in range(r, r - width, -1):
            x, y, d = rr, 0, 1 - rr
            while x >= y:
                for px, py in ((x, y), (y, x), (-y, x), (-x, y), (-x, -y), (-y, -x), (y, -x), (x, -y)):
                    self._plot(cx + px, cy + py, v)
                y += 1
                if d < 0:
                    d += 2 * y + 1
                else:
                    x -= 1
                    d += 2 * (y - x) + 1

    def disc(self, cx, cy, r, v):
        h, w = self.a.shape
        yy, xx = np.ogrid[:h, :w]
        self.a[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = v

    def triangle(self, pts, v):
        """Scanline fill; a row's span covers pixel centres between the edge crossings."""
        (xa, ya), (xb, yb), (xc, yc) = pts
        edges = [((xa, ya), (xb, yb)), ((xb, yb), (xc, yc)), ((xc, yc), (xa, ya))]
        for y in range(min(ya, yb, yc), max(ya, yb, yc) + 1):
            xs = []
            for (x0, y0), (x1, y1) in edges:
                if y0 == y1:
                    continue
                if min(y0, y1) <= y <= max(y0, y1):
                    xs.append(x0 + (y - y0) * (x1 - x0) / (y1 - y0))
            if len(xs) >= 2:
                lo, hi = int(math.ceil(min(xs))), int(math.floor(max(xs)))
                if lo <= hi:
                    self.a[y, lo:hi + 1] = v
        for p, q in zip(pts, pts[1:] + pts[:1]):
            self.line(*p, *q, v)

    def checker(self, cx, cy, r, cell, angle, v):
        h, w = self.a.shape
        yy, xx = np.mgrid[:h, :w].astype(np.float64)
        dx, dy = xx - cx, yy - cy
        u = dx * math.cos(angle) + dy * math.sin(angle)
        t = -dx * math.sin(angle) + dy * math.cos(angle)
        on = (np.floor(u / cell) + np.floor(t / cell)) % 2 == 0
        self.a[on & (dx * dx + dy * dy <= r * r)] = v


# --------------------------------------------------------------------------
# scene construction
# --------------------------------------------------------------------------

def _style(rng: SeededRng) -> tuple[int, int]:
    return rng.randint(0, 96), rng.randint(1, 2)


def class_diagram_scene(seed: int, noise: float = 0.01) -> SceneSpec:
    rng = SeededRng(seed)
    v, sw = _style(rng)
    scene = SceneSpec("uml-class", seed, noise=noise, stroke_value=v, stroke_width=sw, label=0)
    n_boxes = rng.randint(2, 6)
    cell = BASE // 3
    cells = rng.permutation(9)[:n_boxes]
    boxes = []
    for c in sorted(int(c) for c in cells):
        gx, gy = (c % 3) * cell, (c // 3) * cell
        bw, bh = rng.randint(44, cell - 10), rng.randint(50, cell - 10)
        x0 = gx + 4 + rng.randint(0, cell - 8 - bw)
        y0 = gy + 4 + rng.randint(0, cell - 8 - bh)
        x1, y1 = x0 + bw - 1, y0 + bh - 1
        d1 = y0 + rng.randint(10, 15)
        rest = y1 - d1
        d2 = d1 + rng.randint(int(rest * 0.4), int(rest * 0.6))
        boxes.append((x0, y0, x1, y1, d1, d2))

    def anchor(a, b):
        ax = (a[0] + a[2]) // 2
        ay = (a[1] + a[3]) // 2
        bx = (b[0] + b[2]) // 2
        by = (b[1] + b[3]) // 2
        if abs(bx - ax) >= abs(by - ay):
            return ((a[2], ay), (b[0], by)) if bx > ax else ((a[0], ay), (b[2], by))
        return ((ax, a[3]), (bx, b[1])) if by > ay else ((ax, a[1]), (bx, b[3]))

    pairs = [(i, j) for i in range(n_boxes) for j in range(n_boxes) if i < j]
    order = rng.permutation(len(pairs))
    n_edges = min(rng.randint(1, 3), len(pairs))
    heads = []
    for k in order[:n_edges]:
        i, j = pairs[int(k)]
        if rng.random() < 0.5:
            i, j = j, i
        (px, py), (qx, qy) = anchor(boxes[i], boxes[j])
        if rng.random() < 0.5:
            length = math.hypot(qx - px, qy - py)
            ux, uy = (qx - px) / length, (qy - py) / length
            bx, by = qx - ux * 9, qy - uy * 9
            left = (int(round(bx - uy * 5)), int(round(by + ux * 5)))
            right = (int(round(bx + uy * 5)), int(round(by - ux * 5)))
            scene.elements.append(Element("line", (px, py, int(round(bx)), int(round(by))), v, sw))
            heads.append(Element("hollow_arrowhead", ((qx, qy), left, right), v, 1))
        else:
            scene.elements.append(Element("line", (px, py, qx, qy), v, sw))
    for (x0, y0, x1, y1, d1, d2) in boxes:
        scene.elements.append(Element("classbox", (x0, y0, x1, y1, d1, d2), v, sw))
        for top, bottom in ((y0 + sw, d1), (d1 + sw, d2), (d2 + sw, y1 - sw + 1)):
            fits = max(1, (bottom - top - 2) // 4)
            for t in range(min(rng.randint(1, 4), fits)):
                y = top + 2 + 4 * t
                if y >= bottom - 1:
                    break
                length = rng.randint(6, max(6, x1 - x0 - 12))
                scene.elements.append(Element("text", (x0 + 4, y, x0 + 4 + length), v, 1))
    scene.elements += heads
    return scene


def sequence_diagram_scene(seed: int, noise: float = 0.01) -> SceneSpec:
    rng = SeededRng(seed)
    v, sw = _style(rng)
    scene = SceneSpec("uml-sequence", seed, noise=noise, stroke_value=v, stroke_width=sw, label=1)
    n = rng.randint(2, 5)
    margin = 20
    slot = (BASE - 2 * margin) / n
    xs = [int(margin + slot * (i + 0.5)) + rng.randint(-int(slot // 8), int(slot // 8)) for i in range(n)]
    y_top = rng.randint(6, 14)
    head_h = rng.randint(14, 22)
    hb = y_top + head_h
    ends = []
    for x in xs:
        half = min(int(slot // 2) - 4, rng.randint(14, 22))
        scene.elements.append(Element("headbox", (x - half, y_top, x + half, hb), v, sw))
        scene.elements.append(Element("text", (x - half + 4, y_top + head_h // 2, x + half - 4 - rng.randint(0, half // 2)), v, 1))
        y_end = BASE - rng.randint(6, 14)
        ends.append(y_end)
        scene.elements.append(Element("lifeline", (x, hb + 1, y_end), v, sw))
    for _ in range(rng.randint(0, 3)):
        i = rng.randint(0, n - 1)
        top = rng.randint(hb + 8, ends[i] - 50)
        scene.elements.append(Element("activation", (xs[i] - 4, top, xs[i] + 4, top + rng.randint(16, 40)), v, 1))
    used: list[int] = []
    for _ in range(rng.randint(1, 6)):
        i, j = (int(k) for k in rng.permutation(n)[:2])
        for _attempt in range(10):
            y = rng.randint(hb + 10, min(ends) - 8)
            if all(abs(y - u) >= 6 for u in used):
                break
        used.append(y)
        scene.elements.append(Element("message", (xs[i], xs[j], y, rng.random() < 0.3), v, 1))
    return scene


def source_scene(class_id: int, seed: int, noise: float = 0.01) -> SceneSpec:
    if class_id not in range(4):
        raise ValueError("source class id must be 0..3")
    rng = SeededRng(seed)
    v, sw = _style(rng)
    scene = SceneSpec("source-shapes", seed, noise=noise, stroke_value=v, stroke_width=sw, label=class_id)
    el = scene.elements
    if class_id == 0:
        for _ in range(rng.randint(1, 5)):
            r = rng.randint(8, 40)
            el.append(Element("circle", (rng.randint(r + 1, BASE - r - 2), rng.randint(r + 1, BASE - r - 2), r), v, sw))
    elif class_id == 1:
        for _ in range(rng.randint(1, 4)):
            while True:
                pts = [(rng.randint(4, BASE - 5), rng.randint(4, BASE - 5)) for _ in range(3)]
                (ax, ay), (bx, by), (cx, cy) = pts
                area = abs((bx - ax) * (cy - ay) - (cx - ax) * (by - ay)) / 2
                if 300 <= area <= 12000:
                    break
            el.append(Element("triangle", tuple(pts), v, 1))
    elif class_id == 2:
        for _ in range(rng.randint(1, 2)):
            r = rng.randint(30, 80)
            angle = math.radians(rng.randint(15, 75))
            el.append(Element("checker", (rng.randint(r, BASE - 1 - r), rng.randint(r, BASE - 1 - r), r,
                                          rng.randint(4, 12), angle), v, 1))
    else:
        for _ in range(rng.randint(1, 3)):
            x, y = rng.randint(40, BASE - 41), rng.randint(40, BASE - 41)
            pts = [(x, y)]
            for _ in range(rng.randint(5, 12)):
                ang = rng.random() * 2 * math.pi
                step = rng.randint(10, 40)
                x = min(max(int(x + step * math.cos(ang)), 2), BASE - 3)
                y = min(max(int(y + step * math.sin(ang)), 2), BASE - 3)
                pts.append((x, y))
            el.append(Element("polyline", tuple(pts), v, sw))
        for _ in range(rng.randint(1, 3)):
            cx, cy = rng.randint(20, BASE - 21), rng.randint(20, BASE - 21)
            for _ in range(rng.randint(2, 4)):
                r = rng.randint(4, 12)
                el.append(Element("blob", (min(max(cx + rng.randint(-8, 8), r), BASE - 1 - r),
                                           min(max(cy + rng.randint(-8, 8), r), BASE - 1 - r), r), v, 1))
    return scene


def make_scene(kind: str, seed: int, class_id: int = 0, noise: float = 0.01) -> SceneSpec:
    if kind == "uml-class":
        return class_diagram_scene(seed, noise)
    if kind == "uml-sequence":
        return sequence_diagram_scene(seed, noise)
    if kind == "source-shapes":
        return source_scene(class_id, seed, noise)
    raise ValueError(f"unknown scene kind {kind!r}")


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def render(scene: SceneSpec, noise: bool = True) -> np.ndarray:
    r = Raster(scene.height, scene.width)
    for e in scene.elements:
        g = e.geom
        if e.kind == "line":
            r.line(*g, e.value, e.width)
        elif e.kind == "classbox":
            x0, y0, x1, y1, d1, d2 = g
            r.rect(x0, y0, x1, y1, e.value, e.width, fill=WHITE)
            r.hline(x0, x1, d1, e.value, e.width)
            r.hline(x0, x1, d2, e.value, e.width)
        elif e.kind == "text":
            x0, y, x1 = g
            r.hline(x0, x1, y, e.value, 1)
        elif e.kind == "hollow_arrowhead":
            tip, left, right = g
            for p, q in ((tip, left), (left, right), (right, tip)):
                r.line(*p, *q, e.value, 1)
        elif e.kind in ("headbox", "activation"):
            r.rect(*g, e.value, e.width, fill=WHITE)
        elif e.kind == "lifeline":
            x, y0, y1 = g
            r.line(x, y0, x, y1, e.value, e.width, dashed=True)
        elif e.kind == "message":
            x0, x1, y, dashed = g
            r.line(x0, y, x1, y, e.value, 1, dashed=dashed)
            back = -5 if x1 > x0 else 5
            r.line(x1, y, x1 + back, y - 4, e.value, 1)
            r.line(x1, y, x1 + back, y + 4, e.value, 1)
        elif e.kind == "circle":
            r.circle(*g, e.value, e.width)
        elif e.kind == "triangle":
            r.triangle(list(g), e.value)
        elif e.kind == "checker":
            r.checker(*g, e.value)
        elif e.kind == "polyline":
            for p, q in zip(g, g[1:]):
                r.line(*p, *q, e.value, e.width)
        elif e.kind == "blob":
            r.disc(*g, e.value)
        else:
            raise ValueError(f"unknown element kind {e.kind!r}")
    a = r.a
    if noise and scene.noise > 0:
        nrng = SeededRng(child_seed(scene.seed, 1 << 20))
        u = nrng.uniform(a.shape)
        salt = nrng.uniform(a.shape) < 0.5
        hit = u < scene.noise
        a[hit & salt] = WHITE
        a[hit & ~salt] = 0
    return a


def _canvas(canvas) -> tuple[int, int]:
    if isinstance(canvas, int):
        return canvas, canvas
    h, w = canvas
    return int(h), int(w)


def resample(pixels: np.ndarray, canvas) -> Image:
    """Bring a 256x256 render to the experiment size.

    Integer downscale factors use an area average (thin strokes survive);
    anything else goes through bilinear resampling.
    """
    h, w = _canvas(canvas)
    img = Image(pixels)
    if (h, w) == (img.height, img.width):
        return img
    if h == w and img.height == img.width and img.height % h == 0:
        return box_downsample(img, img.height // h)
    return bilinear_resize(img, w, h)


def gen_class_diagram(seed: int, canvas=BASE, noise: float = 0.01) -> Image:
    return resample(render(class_diagram_scene(seed, noise)), canvas)


def gen_sequence_diagram(seed: int, canvas=BASE, noise: float = 0.01) -> Image:
    return resample(render(sequence_diagram_scene(seed, noise)), canvas)


def gen_source_scene(class_id: int, seed: int, canvas=BASE, noise: float = 0.01) -> Image:
    return resample(render(source_scene(class_id, seed, noise)), canvas)


def scene_for(kind: str, index: int, seed: int, noise: float = 0.01) -> SceneSpec:
    """Scene for row ``index`` of a dataset of the given kind (round-robin labels)."""
    s = child_seed(seed, index)
    if kind == "uml":
        return make_scene(("uml-class", "uml-sequence")[index % 2], s, noise=noise)
    if kind == "shapes":
        return source_scene(index % 4, s, noise)
    raise ValueError(f"unknown dataset kind {kind!r}; expected 'uml' or 'shapes'")


def gen_dataset(kind: str, count: int, seed: int, out_dir, canvas=64, noise: float = 0.01) -> DatasetManifest:
    """Write ``count`` PGM images plus ``manifest.csv`` into ``out_dir``."""
    if count < 0:
        raise ValueError("count must be >= 0")
    classes = {"uml": UML_CLASSES, "shapes": SHAPE_CLASSES}.get(kind)
    if classes is None:
        raise ValueError(f"unknown dataset kind {kind!r}; expected 'uml' or 'shapes'")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h, w = _canvas(canvas)
    rows = []
    for i in range(count):
        scene = scene_for(kind, i, seed, noise)
        name = f"{i:06d}_{classes[scene.label]}.pgm"
        write_pnm(resample(render(scene), (h, w)), out / name)
        rows.append(ManifestRow(name, scene.label, scene.seed))
    manifest = DatasetManifest(kind, rows, list(classes), seed, (h, w), out)
    manifest.write(out / "manifest.csv")
    return manifest
