"""Binary PGM/PPM codec, resizing, tensor conversion and directory ingestion."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PNM_EXTENSIONS = (".pgm", ".ppm", ".pnm")
LUMA = np.array([0.299, 0.587, 0.114])


class PNMError(ValueError):
    pass


@dataclass
class Image:
    """8-bit image; ``pixels`` is (H, W) for gray or (H, W, 3) for RGB."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.dtype != np.uint8:
            raise TypeError("Image pixels must be uint8")
        if p.ndim not in (2, 3) or (p.ndim == 3 and p.shape[2] not in (1, 3)):
            raise ValueError(f"unsupported pixel array shape {p.shape}")
        if p.ndim == 3 and p.shape[2] == 1:
            p = p[:, :, 0]
        self.pixels = np.ascontiguousarray(p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()


# --------------------------------------------------------------------------
# PNM
# --------------------------------------------------------------------------

def _header_tokens(data: bytes):
    """Yield (token, end offset) for the four header fields, skipping comments."""
    pos = 0
    n = len(data)
    for _ in range(4):
        while pos < n:
            c = data[pos:pos + 1]
            if c == b"#":
                while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PNMError("truncated PNM header")
        yield data[start:pos], pos


def decode_pnm(data: bytes) -> Image:
    tokens = list(_header_tokens(data))
    magic = tokens[0][0]
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"unsupported PNM magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t, _ in tokens[1:])
    except ValueError as exc:
        raise PNMError("malformed PNM header") from exc
    if width < 1 or height < 1:
        raise PNMError("PNM dimensions must be positive")
    if maxval != 255:
        raise PNMError(f"only maxval 255 is supported, got {maxval}")
    end = tokens[3][1]
    if end >= len(data) or not data[end:end + 1].isspace():
        raise PNMError("missing whitespace after PNM header")
    channels = 1 if magic == b"P5" else 3
    size = width * height * channels
    payload = data[end + 1:end + 1 + size]
    if len(payload) != size:
        raise PNMError(f"truncated PNM payload: {len(payload)} of {size} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return Image(arr.reshape(shape).copy())


def encode_pnm(image: Image) -> bytes:
    magic = b"P5" if image.channels == 1 else b"P6"
    return b"%s\n%d %d\n255\n" % (magic, image.width, image.height) + image.tobytes()


def read_pnm(path) -> Image:
    return decode_pnm(Path(path).read_bytes())


def write_pnm(image: Image, path) -> None:
    Path(path).write_bytes(encode_pnm(image))


# --------------------------------------------------------------------------
# resizing / conversion
# --------------------------------------------------------------------------

def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear_float(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resampling with edge clamp on the first two axes (float64)."""
    a = np.asarray(a, dtype=np.float64)
    r0, r1, fr = _axis_weights(a.shape[0], out_h)
    c0, c1, fc = _axis_weights(a.shape[1], out_w)
    extra = (None,) * (a.ndim - 2)
    fr = fr[(slice(None), None) + extra]
    fc = fc[(None, slice(None)) + extra]
    top = a[r0][:, c0] * (1.0 - fc) + a[r0][:, c1] * fc
    bot = a[r1][:, c0] * (1.0 - fc) + a[r1][:, c1] * fc
    return top * (1.0 - fr) + bot * fr


def round_half_up_u8(v: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)


def bilinear_resize(image: Image, out_w: int, out_h: int) -> Image:
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be positive")
    if (out_w, out_h) == (image.width, image.height):
        return Image(image.pixels.copy())
    return Image(round_half_up_u8(resize_bilinear_float(image.pixels, out_h, out_w)))


def box_downsample(image: Image, factor: int) -> Image:
    """Integer-factor area average (round half up)."""
    h, w = image.height, image.width
    if h % factor or w % factor:
        raise ValueError("image size not divisible by factor")
    p = image.pixels.astype(np.float64)
    shape = (h // factor, factor, w // factor, factor) + p.shape[2:]
    return Image(round_half_up_u8(p.reshape(shape).mean(axis=(1, 3))))


def to_gray(image: Image) -> np.ndarray:
    if image.channels == 1:
        return image.pixels.astype(np.float64)
    return image.pixels.astype(np.float64) @ LUMA


def to_input_tensor(image: Image, channels: int = 1, dtype=np.float32) -> np.ndarray:
    """Image -> (1, C, H, W) ink intensity in [0, 1]: blank page 0, black ink 1."""
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    if channels == 1:
        plane = (255.0 - to_gray(image)) / 255.0
        return plane[None, None].astype(dtype)
    if image.channels == 1:
        plane = (255.0 - image.pixels.astype(np.float64)) / 255.0
        return np.repeat(plane[None, None], 3, axis=1).astype(dtype)
    return ((255.0 - image.pixels.astype(np.float64)) / 255.0).transpose(2, 0, 1)[None].astype(dtype)


def batch_to_tensor(pixels: np.ndarray, channels: int = 1, dtype=np.float32) -> np.ndarray:
    """Stack of gray images (N, H, W) uint8 -> (N, C, H, W) ink intensity in [0, 1].

    Inverting puts the signal (strokes) away from zero, so ReLU features
    respond to drawn structure rather than to the blank page.
    """
    x = ((np.float32(255.0) - pixels.astype(np.float32)) / np.float32(255.0))[:, None]
    if channels == 3:
        x = np.repeat(x, 3, axis=1)
    return x.astype(dtype, copy=False)


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

@dataclass
class ManifestRow:
    filename: str
    label: int
    seed: int


@dataclass
class DatasetManifest:
    kind: str
    rows: list[ManifestRow]
    classes: list[str]
    seed: int | None = None
    canvas: tuple[int, int] | None = None
    root: Path | None = None
    skipped: int = 0

    @property
    def count(self) -> int:
        return len(self.rows)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.rows], dtype=np.int64)

    def path(self, row: ManifestRow) -> Path:
        return (self.root or Path(".")) / row.filename

    def to_csv(self) -> str:
        canvas = f"{self.canvas[0]}x{self.canvas[1]}" if self.canvas else ""
        seed = "" if self.seed is None else str(self.seed)
        lines = [
            f"# kind={self.kind} count={self.count} seed={seed} canvas={canvas} classes={','.join(self.classes)}",
            "filename,label,seed",
        ]
        lines += [f"{r.filename},{r.label},{r.seed}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="\n")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        meta = {}
        rows = []
        header_seen = False
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.startswith("#"):
                for item in line[1:].split():
                    k, _, v = item.partition("=")
                    meta[k] = v
                continue
            if not line.strip():
                continue
            if not header_seen:
                if line.strip() != "filename,label,seed":
                    raise ValueError(f"{path}: unexpected manifest header {line!r}")
                header_seen = True
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ValueError(f"{path}: malformed manifest row {line!r}")
            rows.append(ManifestRow(parts[0], int(parts[1]), int(parts[2])))
        canvas = None
        if meta.get("canvas"):
            h, w = meta["canvas"].split("x")
            canvas = (int(h), int(w))
        classes = meta["classes"].split(",") if meta.get("classes") else sorted({str(r.label) for r in rows})
        seed = int(meta["seed"]) if meta.get("seed") else None
        return cls(meta.get("kind", "unknown"), rows, classes, seed, canvas, path.parent)

    def load_pixels(self) -> np.ndarray:
        """All images as a gray (N, H, W) uint8 stack (RGB is luma-reduced)."""
        imgs = []
        for r in self.rows:
            img = read_pnm(self.path(r))
            imgs.append(img.pixels if img.channels == 1 else round_half_up_u8(to_gray(img)))
        if not imgs:
            return np.zeros((0, 0, 0), dtype=np.uint8)
        shapes = {i.shape for i in imgs}
        if len(shapes) != 1:
            raise ValueError(f"images have differing sizes {sorted(shapes)}; resize them first")
        return np.stack(imgs)


def ingest_directory(root) -> DatasetManifest:
    """Labelled manifest from ``root/<label>/*.pgm|*.ppm`` (sorted labels and files)."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ValueError(f"{root}: no class subdirectories")
    rows = []
    skipped = 0
    for label, cls in enumerate(classes):
        found = 0
        for f in sorted((root / cls).iterdir()):
            if not f.is_file():
                continue
            if f.suffix.lower() not in PNM_EXTENSIONS:
                skipped += 1
                continue
            try:
                read_pnm(f)
            except (OSError, PNMError) as exc:
                raise ValueError(f"unreadable image {f}: {exc}") from exc
            rows.append(ManifestRow(f"{cls}/{f.name}", label, -1))
            found += 1
        if not found:
            raise ValueError(f"class directory {root / cls} contains no PGM/PPM images")
    if skipped:
        log.warning("skipped %d files with unsupported extensions under %s", skipped, root)
    return DatasetManifest("ingested", rows, classes, None, None, root, skipped)
