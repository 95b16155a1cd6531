"""Weight files, freezing policies, fingerprints and the backbone feature cache.

NNWT layout (all integers little-endian)::

    b"NNWT" | u32 version (=1) | u64 header length | UTF-8 JSON header | payload

The header carries ``arch`` (the ArchSpec dict), ``arch_id``,
``input_shape`` and ``tensors``: ``[{name, dtype: "f32", shape, offset}]``
with byte offsets into the payload of contiguous row-major float32 data.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .models import ArchSpec, Model, freeze_all_but_last_dense
from .imageio import batch_to_tensor

MAGIC = b"NNWT"
VERSION = 1
FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211


class WeightFileError(ValueError):
    pass


class CacheMismatchError(ValueError):
    pass


# --------------------------------------------------------------------------
# FNV-1a
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _fnv1a(data, h):
    prime = np.uint64(1099511628211)
    for i in range(data.shape[0]):
        h ^= np.uint64(data[i])
        h *= prime
    return h


def fingerprint(data) -> int:
    """64-bit FNV-1a over raw bytes (or an array's buffer)."""
    if isinstance(data, np.ndarray):
        buf = np.ascontiguousarray(data).view(np.uint8).reshape(-1)
    else:
        buf = np.frombuffer(bytes(data), dtype=np.uint8)
    return int(_fnv1a(buf, np.uint64(FNV_OFFSET)))


def image_hashes(pixels: np.ndarray) -> list[int]:
    return [fingerprint(p) for p in pixels]


def _payload(tensors) -> bytes:
    return b"".join(np.ascontiguousarray(t, dtype="<f4").tobytes() for _, t in tensors)


def model_fingerprint(model: Model, backbone_only: bool = True) -> int:
    layers = model.backbone_layers() if backbone_only else None
    return fingerprint(_payload(model.named_params(layers)))


# --------------------------------------------------------------------------
# NNWT
# --------------------------------------------------------------------------

@dataclass
class WeightFile:
    header: dict
    tensors: dict[str, np.ndarray]

    @property
    def names(self) -> list[str]:
        return [t["name"] for t in self.header["tensors"]]

    @property
    def arch(self) -> ArchSpec | None:
        return ArchSpec.from_dict(self.header["arch"]) if "arch" in self.header else None


@dataclass
class LoadReport:
    loaded: list[str] = field(default_factory=list)
    unmatched: list[str] = field(default_factory=list)
    unused: list[str] = field(default_factory=list)


def encode_weights(named: list[tuple[str, np.ndarray]], meta: dict) -> bytes:
    table = []
    offset = 0
    for name, t in named:
        table.append({"name": name, "dtype": "f32", "shape": list(t.shape), "offset": offset})
        offset += int(t.size) * 4
    header = dict(meta, tensors=table)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + _payload(named)


def save_weights(model: Model, path, backbone_only: bool = False, meta: dict | None = None) -> WeightFile:
    layers = model.backbone_layers() if backbone_only else None
    named = model.named_params(layers)
    info = {
        "arch": model.spec.to_dict(),
        "arch_id": model.arch_id,
        "input_shape": list(model.spec.input_shape),
        "backbone_only": backbone_only,
    }
    if meta:
        info["meta"] = meta
    data = encode_weights(named, info)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return decode_weights(data)


def decode_weights(data: bytes) -> WeightFile:
    if len(data) < 16 or data[:4] != MAGIC:
        raise WeightFileError("not an NNWT file (bad magic)")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise WeightFileError(f"unsupported NNWT version {version}")
    if 16 + hlen > len(data):
        raise WeightFileError("truncated NNWT header")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFileError("corrupt NNWT header") from exc
    payload = memoryview(data)[16 + hlen:]
    tensors = {}
    end = 0
    total = 0
    for entry in header.get("tensors", []):
        if entry.get("dtype") != "f32":
            raise WeightFileError(f"unsupported dtype {entry.get('dtype')!r}")
        name, shape, off = entry["name"], tuple(entry["shape"]), int(entry["offset"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if off < end:
            raise WeightFileError(f"tensor {name!r} overlaps its predecessor or offsets are not ascending")
        if off + nbytes > len(payload):
            raise WeightFileError(f"truncated payload for tensor {name!r}")
        if name in tensors:
            raise WeightFileError(f"duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(payload[off:off + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
        end = off + nbytes
        total += nbytes
    if total != len(payload):
        raise WeightFileError(f"payload length {len(payload)} != sum of tensor sizes {total}")
    return WeightFile(header, tensors)


def read_weights(path) -> WeightFile:
    return decode_weights(Path(path).read_bytes())


def load_weights(model: Model, path, mode: str = "strict") -> LoadReport:
    """Load an NNWT file into ``model``.

    ``strict``: names and shapes must match exactly.  ``by-name``: copy every
    tensor whose name and shape match; everything else keeps its current
    value and is listed in the report.  The model is untouched on error.
    """
    if mode not in ("strict", "by-name"):
        raise ValueError(f"unknown load mode {mode!r}")
    wf = read_weights(path)
    current = dict(model.named_params())
    report = LoadReport()
    for name, p in current.items():
        t = wf.tensors.get(name)
        if t is not None and t.shape == p.shape:
            report.loaded.append(name)
        else:
            report.unmatched.append(name)
    report.unused = [n for n in wf.names if n not in report.loaded]
    if mode == "strict" and (report.unmatched or report.unused):
        raise WeightFileError(f"strict load mismatch: unmatched={report.unmatched} unused={report.unused}")
    for name in report.loaded:
        model.set_param(name, wf.tensors[name])
    return report


def load_model(path, dtype=np.float32) -> Model:
    """Build the architecture recorded in a full weight file and load it strictly."""
    from .models import build

    wf = read_weights(path)
    if wf.arch is None:
        raise WeightFileError("weight file has no architecture record")
    model = build(wf.arch, dtype)
    load_weights(model, path, "strict")
    return model


# --------------------------------------------------------------------------
# freezing
# --------------------------------------------------------------------------

def freeze_layers(model: Model, policy: str = "all-but-last-dense", names=None) -> None:
    if policy == "all-but-last-dense":
        freeze_all_but_last_dense(model)
    elif policy == "none":
        for layer in model.layers:
            layer.frozen = False
    elif policy == "by-name":
        names = set(names or ())
        known = {l.name for l in model.layers}
        unknown = names - known
        if unknown:
            raise KeyError(f"unknown layer names: {sorted(unknown)}")
        for layer in model.layers:
            layer.frozen = layer.name in names
    else:
        raise ValueError(f"unknown freeze policy {policy!r}")


# --------------------------------------------------------------------------
# feature cache
# --------------------------------------------------------------------------

class FeatureCache:
    """Post-GAP feature vectors keyed by image content hash, bound to one backbone.

    On disk (``root``): ``features.idx`` is text -- a first line
    ``NNFC 1 <fingerprint hex> <dim>`` then one ``<image hash hex> <byte offset>``
    line per entry -- and ``features.bin`` holds the raw little-endian
    float32 vectors.  Both files are replaced atomically on :meth:`flush`.
    """

    INDEX = "features.idx"
    PAYLOAD = "features.bin"

    def __init__(self, root=None, fingerprint: int | None = None):
        self.root = Path(root) if root is not None else None
        self.fingerprint = fingerprint
        self.dim: int | None = None
        self.entries: dict[int, np.ndarray] = {}
        self._order: list[int] = []
        self._dirty = False
        self.hits = 0
        self.misses = 0
        if self.root is not None and (self.root / self.INDEX).exists():
            self._load()

    def __len__(self) -> int:
        return len(self.entries)

    def _load(self):
        lines = (self.root / self.INDEX).read_text(encoding="ascii").splitlines()
        tag, version, fp, dim = lines[0].split()
        if tag != "NNFC" or version != "1":
            raise ValueError("not a feature cache index")
        fp, dim = int(fp, 16), int(dim)
        if self.fingerprint is not None and fp != self.fingerprint:
            raise CacheMismatchError("cache on disk belongs to a different backbone")
        self.fingerprint, self.dim = fp, dim
        payload = (self.root / self.PAYLOAD).read_bytes()
        for line in lines[1:]:
            h, off = line.split()
            off = int(off)
            vec = np.frombuffer(payload[off:off + 4 * dim], dtype="<f4").astype(np.float32)
            self.entries[int(h, 16)] = vec
            self._order.append(int(h, 16))

    def bind(self, fp: int) -> None:
        if self.fingerprint is None:
            self.fingerprint = fp
        elif self.fingerprint != fp:
            raise CacheMismatchError(
                f"feature cache fingerprint {self.fingerprint:016x} does not match backbone {fp:016x}")

    def get(self, h: int):
        return self.entries.get(h)

    def put(self, h: int, vec: np.ndarray) -> None:
        if self.dim is None:
            self.dim = int(vec.shape[0])
        if h not in self.entries:
            self._order.append(h)
        self.entries[h] = np.array(vec, dtype=np.float32)
        self._dirty = True

    def flush(self) -> None:
        if self.root is None or not self._dirty:
            return
        self.root.mkdir(parents=True, exist_ok=True)
        index = [f"NNFC 1 {self.fingerprint:016x} {self.dim}"]
        chunks = []
        for i, h in enumerate(self._order):
            index.append(f"{h:016x} {i * 4 * self.dim}")
            chunks.append(self.entries[h].astype("<f4").tobytes())
        for name, data in ((self.PAYLOAD, b"".join(chunks)), (self.INDEX, ("\n".join(index) + "\n").encode("ascii"))):
            tmp = self.root / (name + ".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, self.root / name)
        self._dirty = False


def extract_features(model: Model, pixels: np.ndarray, cache: FeatureCache | None = None,
                     batch_size: int = 64) -> np.ndarray:
    """Eval-mode backbone output through global average pooling, (N, C) float32.

    ``pixels`` is a (N, H, W) uint8 stack.  Cached and freshly computed
    vectors are bitwise identical because each image's forward pass does
    not depend on its batch companions.
    """
    stop = model.gap_index + 1
    channels = model.spec.input_shape[0]
    if cache is None:
        return model.predict(batch_to_tensor(pixels, channels, model.dtype), batch_size, stop=stop)
    cache.bind(model_fingerprint(model))
    hashes = image_hashes(pixels)
    todo = []
    seen = set()
    for i, h in enumerate(hashes):
        if cache.get(h) is None and h not in seen:
            todo.append(i)
            seen.add(h)
    cache.misses += len(todo)
    cache.hits += len(hashes) - len(todo)
    if todo:
        feats = model.predict(batch_to_tensor(pixels[todo], channels, model.dtype), batch_size, stop=stop)
        for i, f in zip(todo, feats):
            cache.put(hashes[i], f)
    return np.stack([cache.get(h) for h in hashes]).astype(np.float32, copy=False)
