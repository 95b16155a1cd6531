"""Architecture builders, parameter accounting and snapshot/restore."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .layers import (
    Conv2D,
    Dense,
    Dropout,
    GlobalAvgPool,
    Layer,
    MaxPool2x2,
    ReLU,
    loss_fn,
)
from .tensor import DEFAULT_DTYPE, SeededRng

ARCH_IDS = ("small-cnn", "vgg16", "vgg16-frozen", "mini", "mini-frozen")

VGG16_BLOCKS = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))
SMALL_CNN_WIDTHS = (64, 128, 256, 512)
SMALL_CNN_HIDDEN = 512

# Per arch-id defaults: (input shape, width multiplier).
_DEFAULTS = {
    "small-cnn": ((3, 250, 250), Fraction(1)),
    "vgg16": ((3, 250, 250), Fraction(1)),
    "vgg16-frozen": ((3, 250, 250), Fraction(1)),
    "mini": ((1, 64, 64), Fraction(1, 8)),
    "mini-frozen": ((1, 64, 64), Fraction(1, 8)),
}


def parse_width(value) -> Fraction:
    w = Fraction(str(value)) if not isinstance(value, Fraction) else value
    if w <= 0:
        raise ValueError("width multiplier must be positive")
    return w


def scaled(channels: int, width_mult: Fraction) -> int:
    return max(8, int(channels * width_mult))


@dataclass(frozen=True)
class ArchSpec:
    arch_id: str
    input_shape: tuple[int, int, int] = None
    width_mult: Fraction = None
    outputs: int = 1
    dropout: float = 0.5
    kernel_size: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.arch_id not in ARCH_IDS:
            raise ValueError(f"unknown arch id {self.arch_id!r}; expected one of {ARCH_IDS}")
        shape, width = _DEFAULTS[self.arch_id]
        if self.input_shape is None:
            object.__setattr__(self, "input_shape", shape)
        else:
            object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "width_mult", parse_width(self.width_mult if self.width_mult is not None else width))
        if self.outputs < 1:
            raise ValueError("outputs must be >= 1")

    @property
    def frozen(self) -> bool:
        return self.arch_id.endswith("-frozen")

    @property
    def family(self) -> str:
        return "small-cnn" if self.arch_id == "small-cnn" else "vgg16"

    def to_dict(self) -> dict:
        return {
            "arch_id": self.arch_id,
            "input_shape": list(self.input_shape),
            "width_mult": str(self.width_mult),
            "outputs": self.outputs,
            "dropout": self.dropout,
            "kernel_size": self.kernel_size,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(
            arch_id=d["arch_id"],
            input_shape=tuple(d["input_shape"]),
            width_mult=parse_width(d["width_mult"]),
            outputs=int(d["outputs"]),
            dropout=float(d.get("dropout", 0.5)),
            kernel_size=int(d.get("kernel_size", 3)),
            seed=int(d.get("seed", 0)),
        )


class Model:
    """Ordered layer stack with per-layer freeze flags."""

    def __init__(self, spec: ArchSpec, layers: list[Layer]):
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self.spec = spec
        self.layers = layers
        self._span = (0, len(layers))
        shape = spec.input_shape
        for layer in layers:
            shape = layer.output_shape(shape)
        if shape != (spec.outputs,):
            raise ValueError(f"model output shape {shape} != ({spec.outputs},)")

    def __repr__(self) -> str:
        total, trainable = count_params(self)
        return f"Model({self.spec.arch_id!r}, layers={len(self.layers)}, params={total}, trainable={trainable})"

    @property
    def arch_id(self) -> str:
        return self.spec.arch_id

    @property
    def outputs(self) -> int:
        return self.spec.outputs

    @property
    def dtype(self):
        for layer in self.layers:
            for p in layer.params.values():
                return p.dtype
        return np.dtype(DEFAULT_DTYPE)

    def loss(self):
        return loss_fn(self.outputs)

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    @property
    def gap_index(self) -> int:
        for i, layer in enumerate(self.layers):
            if isinstance(layer, GlobalAvgPool):
                return i
        raise ValueError("model has no global average pooling layer")

    @property
    def head_start(self) -> int:
        """Index of the first layer after global average pooling."""
        return self.gap_index + 1

    def backbone_layers(self) -> list[Layer]:
        return self.layers[:self.gap_index]

    def named_params(self, layers=None) -> list[tuple[str, np.ndarray]]:
        out = []
        for layer in (self.layers if layers is None else layers):
            for pname, p in layer.params.items():
                out.append((f"{layer.name}.{pname}", p))
        return out

    def set_param(self, full_name: str, value: np.ndarray) -> None:
        lname, pname = full_name.rsplit(".", 1)
        layer = self.layer(lname)
        if layer.params[pname].shape != value.shape:
            raise ValueError(f"shape mismatch for {full_name}")
        layer.params[pname] = value.astype(layer.params[pname].dtype, copy=True)

    def astype(self, dtype) -> "Model":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def attach_rng(self, rng: SeededRng) -> None:
        """Give every dropout layer its own child stream of ``rng``."""
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dropout):
                layer.rng = rng.spawn(i)

    def forward(self, x, train=False, cache=True, start=0, stop=None):
        stop = len(self.layers) if stop is None else stop
        if cache:
            self._span = (start, stop)
        for layer in self.layers[start:stop]:
            x = layer.forward(x, train=train, cache=cache)
        return x

    def backward(self, dy, need_dx=False):
        """Backpropagate through the span of the last cached forward.

        Stops below the lowest trainable layer unless ``need_dx``.
        """
        start, stop = self._span
        lowest = stop
        for i in range(start, stop):
            if self.layers[i].has_params and not self.layers[i].frozen:
                lowest = i
                break
        floor = start if need_dx else lowest
        for i in range(stop - 1, floor - 1, -1):
            dy = self.layers[i].backward(dy, need_dx=need_dx or i > floor)
        return dy if need_dx else None

    def clear_cache(self) -> None:
        for layer in self.layers:
            layer.clear_cache()

    def predict(self, x, batch_size: int = 64, start: int = 0, stop=None) -> np.ndarray:
        """Eval-mode forward in batches without caching."""
        outs = [self.forward(x[i:i + batch_size], train=False, cache=False, start=start, stop=stop)
                for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    def trainable_layers(self) -> list[Layer]:
        return [l for l in self.layers if l.has_params and not l.frozen]


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------

def _init(layers: list[Layer], seed: int, dtype) -> None:
    root = SeededRng(seed)
    for i, layer in enumerate(layers):
        layer.init_params(root.spawn(i), dtype)


def build_vgg16(input_shape=(3, 250, 250), width_mult=1, outputs: int = 1, seed: int = 0,
                arch_id: str = "vgg16", dropout: float = 0.5, dtype=DEFAULT_DTYPE) -> Model:
    spec = ArchSpec(arch_id, tuple(input_shape), parse_width(width_mult), outputs, dropout, 3, seed)
    return _build_vgg(spec, dtype)


def _build_vgg(spec: ArchSpec, dtype) -> Model:
    layers: list[Layer] = []
    cin = spec.input_shape[0]
    for b, block in enumerate(VGG16_BLOCKS, start=1):
        for j, ch in enumerate(block, start=1):
            cout = scaled(ch, spec.width_mult)
            layers.append(Conv2D(f"block{b}_conv{j}", cin, cout, 3))
            layers.append(ReLU(f"block{b}_relu{j}"))
            cin = cout
        layers.append(MaxPool2x2(f"block{b}_pool"))
    layers += [
        GlobalAvgPool("gap"),
        Dropout("head_dropout", spec.dropout),
        Dense("head_dense", cin, spec.outputs),
    ]
    _init(layers, spec.seed, dtype)
    model = Model(spec, layers)
    if spec.frozen:
        freeze_all_but_last_dense(model)
    return model


def build_small_cnn(input_shape=(3, 250, 250), outputs: int = 1, seed: int = 0, width_mult=1,
                    dropout: float = 0.5, kernel_size: int = 3, dtype=DEFAULT_DTYPE) -> Model:
    spec = ArchSpec("small-cnn", tuple(input_shape), parse_width(width_mult), outputs, dropout,
                    kernel_size, seed)
    return _build_small(spec, dtype)


def _build_small(spec: ArchSpec, dtype) -> Model:
    layers: list[Layer] = []
    cin = spec.input_shape[0]
    for i, ch in enumerate(SMALL_CNN_WIDTHS, start=1):
        cout = scaled(ch, spec.width_mult)
        layers += [Conv2D(f"conv{i}", cin, cout, spec.kernel_size), ReLU(f"relu{i}"), MaxPool2x2(f"pool{i}")]
        cin = cout
    hidden = scaled(SMALL_CNN_HIDDEN, spec.width_mult)
    layers += [
        Dropout("dropout", spec.dropout),
        GlobalAvgPool("gap"),
        Dense("fc1", cin, hidden),
        ReLU("fc1_relu"),
        Dense("head_dense", hidden, spec.outputs),
    ]
    _init(layers, spec.seed, dtype)
    return Model(spec, layers)


def build(spec: ArchSpec, dtype=DEFAULT_DTYPE) -> Model:
    if spec.family == "small-cnn":
        return _build_small(spec, dtype)
    return _build_vgg(spec, dtype)


def freeze_all_but_last_dense(model: Model) -> None:
    last = max(i for i, l in enumerate(model.layers) if isinstance(l, Dense))
    for i, layer in enumerate(model.layers):
        layer.frozen = i != last


# --------------------------------------------------------------------------
# accounting / snapshots
# --------------------------------------------------------------------------

def count_params(model) -> tuple[int, int]:
    layers = model.layers if hasattr(model, "layers") else [model]
    total = sum(l.param_count() for l in layers)
    trainable = sum(l.param_count() for l in layers if not l.frozen)
    return total, trainable


def backbone_param_count(model: Model) -> int:
    return sum(l.param_count() for l in model.backbone_layers())


@dataclass
class Snapshot:
    arch_id: str
    tensors: list[tuple[str, np.ndarray]] = field(default_factory=list)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Snapshot) or len(self.tensors) != len(other.tensors):
            return False
        return all(a == c and b.dtype == d.dtype and np.array_equal(b, d)
                   for (a, b), (c, d) in zip(self.tensors, other.tensors))


def snapshot(model: Model) -> Snapshot:
    return Snapshot(model.arch_id, [(n, p.copy()) for n, p in model.named_params()])


def restore(model: Model, snap: Snapshot) -> None:
    current = model.named_params()
    if [n for n, _ in current] != [n for n, _ in snap.tensors]:
        raise ValueError("snapshot parameter names do not match the model")
    for (name, p), (_, saved) in zip(current, snap.tensors):
        if p.shape != saved.shape:
            raise ValueError(f"snapshot shape mismatch for {name}: {saved.shape} vs {p.shape}")
    for name, saved in snap.tensors:
        lname, pname = name.rsplit(".", 1)
        model.layer(lname).params[pname] = saved.copy()


def params_equal(model: Model, snap: Snapshot, layers=None) -> bool:
    """Bitwise comparison of (a subset of) model parameters against a snapshot."""
    saved = dict(snap.tensors)
    return all(np.array_equal(p, saved[n]) and p.dtype == saved[n].dtype
               for n, p in model.named_params(layers))


def with_outputs(spec: ArchSpec, outputs: int) -> ArchSpec:
    return replace(spec, outputs=outputs)
