"""Layers with hand-written backward passes, losses, and a gradient checker."""
from __future__ import annotations

import copy
import math

import numpy as np

from .tensor import DEFAULT_DTYPE, SeededRng, col2im_batch, im2col_batch

# Above this many im2col elements a conv layer recomputes columns in backward
# instead of caching them.
COLS_CACHE_BUDGET = 1 << 25
# Chunk size (elements) for the im2col buffer of one forward step.
COLS_CHUNK_BUDGET = 1 << 24


class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.frozen = False
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def __repr__(self) -> str:
        flag = ", frozen" if self.frozen else ""
        return f"{type(self).__name__}({self.name!r}{flag})"

    @property
    def has_params(self) -> bool:
        return bool(self.params)

    def param_count(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def init_params(self, rng: SeededRng, dtype=DEFAULT_DTYPE) -> None:
        pass

    def astype(self, dtype) -> None:
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        self.grads = {}

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, x: np.ndarray, train: bool = False, cache: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, need_dx: bool = True):
        raise NotImplementedError

    def clear_cache(self) -> None:
        self._cache = None


def glorot_uniform(rng: SeededRng, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return ((2.0 * rng.uniform(shape) - 1.0) * limit).astype(dtype)


class Conv2D(Layer):
    """Stride-1 "same" convolution (cross-correlation) via im2col + stacked GEMM.

    Each image is multiplied separately (``np.matmul`` over a stacked
    batch), so an image's output never depends on which batch it sits in.
    """

    kind = "conv2d"

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__(name)
        if kernel_size % 2 != 1:
            raise ValueError("kernel size must be odd for 'same' padding")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        self.pad = (kernel_size - 1) // 2

    def init_params(self, rng, dtype=DEFAULT_DTYPE):
        k2 = self.k * self.k
        shape = (self.out_channels, self.in_channels, self.k, self.k)
        self.params = {
            "W": glorot_uniform(rng, shape, self.in_channels * k2, self.out_channels * k2, dtype),
            "b": np.zeros(self.out_channels, dtype=dtype),
        }

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ValueError(f"{self.name}: expected {self.in_channels} channels, got {c}")
        return (self.out_channels, h, w)

    def _wmat(self):
        return self.params["W"].reshape(self.out_channels, -1)

    def forward(self, x, train=False, cache=True):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(f"{self.name}: expected {self.in_channels} channels, got {c}")
        wm = self._wmat()
        b = self.params["b"][:, None]
        per_image = c * self.k * self.k * h * w
        step = max(1, COLS_CHUNK_BUDGET // per_image)
        keep_cols = cache and n * per_image <= COLS_CACHE_BUDGET
        y = np.empty((n, self.out_channels, h * w), dtype=x.dtype)
        kept = []
        for i in range(0, n, step):
            cols = im2col_batch(x[i:i + step], self.k, 1, self.pad)
            np.matmul(wm, cols, out=y[i:i + step])
            y[i:i + step] += b
            if keep_cols:
                kept.append(cols)
        if cache:
            self._cache = (x.shape, kept if keep_cols else None, None if keep_cols else x, step)
        return y.reshape(n, self.out_channels, h, w)

    def backward(self, dy, need_dx=True):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        x_shape, kept, x, step = self._cache
        n = x_shape[0]
        dyr = dy.reshape(n, self.out_channels, -1)
        wm = self._wmat()
        dx = np.empty(x_shape, dtype=dy.dtype) if need_dx else None
        dw = None
        for j, i in enumerate(range(0, n, step)):
            cols = kept[j] if kept is not None else im2col_batch(x[i:i + step], self.k, 1, self.pad)
            d = dyr[i:i + step]
            if not self.frozen:
                part = np.matmul(d, cols.transpose(0, 2, 1)).sum(axis=0)
                dw = part if dw is None else dw + part
            if need_dx:
                dcols = np.matmul(wm.T, d)
                dx[i:i + step] = col2im_batch(dcols, (d.shape[0],) + tuple(x_shape[1:]), self.k, 1, self.pad)
        if not self.frozen:
            self.grads = {"W": dw.reshape(self.params["W"].shape), "b": dyr.sum(axis=(0, 2))}
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, cache=True):
        mask = x > 0
        if cache:
            self._cache = mask
        return np.where(mask, x, np.zeros((), dtype=x.dtype))

    def backward(self, dy, need_dx=True):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        return np.where(self._cache, dy, np.zeros((), dtype=dy.dtype)) if need_dx else None


class MaxPool2x2(Layer):
    """2x2 stride-2 max pooling.

    Odd extents are padded by one trailing row/column of -inf first, so the
    pad never wins.  Ties go
    to the first element of the window in row-major order.
    """

    kind = "maxpool2x2"

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (c, (h + 1) // 2, (w + 1) // 2)

    def forward(self, x, train=False, cache=True):
        n, c, h, w = x.shape
        ph, pw = h % 2, w % 2
        if ph or pw:
            x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
        h2, w2 = (h + ph) // 2, (w + pw) // 2
        win = x.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        if cache:
            self._cache = (idx, (n, c, h, w))
        return y

    def backward(self, dy, need_dx=True):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        if not need_dx:
            return None
        idx, (n, c, h, w) = self._cache
        h2, w2 = idx.shape[2], idx.shape[3]
        g = np.zeros((n, c, h2, w2, 4), dtype=dy.dtype)
        np.put_along_axis(g, idx[..., None], dy[..., None], axis=-1)
        g = g.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        return np.ascontiguousarray(g[:, :, :h, :w])


class Dropout(Layer):
    """Inverted dropout; identity in eval mode."""

    kind = "dropout"

    def __init__(self, name: str, rate: float = 0.5):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate
        self.rng: SeededRng | None = None

    def forward(self, x, train=False, cache=True):
        if not train:
            if cache:
                self._cache = None
            return x
        if self.rng is None:
            raise RuntimeError(f"{self.name}: no rng attached for training-mode dropout")
        keep = self.rng.uniform(x.shape) >= self.rate
        scale = (keep * (1.0 / (1.0 - self.rate))).astype(x.dtype)
        if cache:
            self._cache = scale
        return x * scale

    def backward(self, dy, need_dx=True):
        if not need_dx:
            return None
        return dy if self._cache is None else dy * self._cache


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def output_shape(self, in_shape):
        return (in_shape[0],)

    def forward(self, x, train=False, cache=True):
        if cache:
            self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy, need_dx=True):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        if not need_dx:
            return None
        n, c, h, w = self._cache
        return np.broadcast_to((dy / (h * w))[:, :, None, None], (n, c, h, w)).copy()


class Dense(Layer):
    kind = "dense"

    def __init__(self, name: str, in_features: int, out_features: int):
        super().__init__(name)
        self.in_features = in_features
        self.out_features = out_features

    def init_params(self, rng, dtype=DEFAULT_DTYPE):
        self.params = {
            "W": glorot_uniform(rng, (self.in_features, self.out_features),
                                self.in_features, self.out_features, dtype),
            "b": np.zeros(self.out_features, dtype=dtype),
        }

    def output_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ValueError(f"{self.name}: expected ({self.in_features},) input, got {in_shape}")
        return (self.out_features,)

    def forward(self, x, train=False, cache=True):
        if cache:
            self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy, need_dx=True):
        x = self._cache
        if x is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        if not self.frozen:
            self.grads = {"W": x.T @ dy, "b": dy.sum(axis=0)}
        return dy @ self.params["W"].T if need_dx else None


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def sigmoid_bce(logit: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy on raw logits, in log-sum-exp form."""
    z = np.asarray(logit)
    y = np.asarray(labels, dtype=z.dtype).reshape(z.shape)
    n = z.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    losses = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    dz = (sigmoid(z) - y) / n
    return float(losses.sum() / n), dz.astype(z.dtype, copy=False)


def softmax_ce(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    z = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float((lse - shifted[rows, labels]).sum() / n)
    p = np.exp(shifted - lse[:, None])
    p[rows, labels] -= 1.0
    return loss, (p / n).astype(z.dtype, copy=False)


def loss_fn(outputs: int):
    return sigmoid_bce if outputs == 1 else softmax_ce


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two max magnitudes."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def safe_input(kind: str, shape, rng: SeededRng) -> np.ndarray:
    """Random input kept away from the kinks of relu / maxpool."""
    x = rng.normal(shape)
    if kind == "relu":
        return np.sign(x) * (0.1 + np.abs(x))
    if kind == "maxpool2x2":
        n = math.prod(shape)
        return (rng.permutation(n).astype(np.float64) * 0.01).reshape(shape)
    return x


def _rng_state(target):
    layers = target.layers if hasattr(target, "layers") else [target]
    return [(l, l.rng.get_state()) for l in layers if getattr(l, "rng", None) is not None]


def _restore(states):
    for layer, st in states:
        layer.rng.set_state(st)


def grad_check_detail(target, input_shape, rng: SeededRng, eps: float = 1e-5,
                      train: bool = False, x: np.ndarray | None = None) -> dict[str, float]:
    """Central-difference check of a layer or model in float64.

    Returns ``{"x": err, "<layer>.<param>": err, ...}``; parameters of
    frozen layers are absent.  The probe objective is ``sum(r * f(x))`` for
    a fixed random ``r``.
    """
    target = copy.deepcopy(target)
    layers = target.layers if hasattr(target, "layers") else [target]
    for layer in layers:
        layer.astype(np.float64)
    kind = layers[0].kind
    if x is None:
        x = safe_input(kind, input_shape, rng)
    x = np.asarray(x, dtype=np.float64)

    def fwd(inp):
        return target.forward(inp, train=train)

    states = _rng_state(target)
    y = fwd(x)
    r = rng.normal(y.shape)
    dx = target.backward(r, need_dx=True)
    analytic = {"x": dx}
    for layer in layers:
        if not layer.frozen:
            for pname, g in layer.grads.items():
                analytic[f"{layer.name}.{pname}"] = g

    def objective(inp):
        _restore(states)
        return float(np.sum(r * fwd(inp)))

    out = {"x": relative_error(dx, _numeric(objective, x, eps, x))}
    for layer in layers:
        if layer.frozen:
            continue
        for pname, p in layer.params.items():
            out[f"{layer.name}.{pname}"] = relative_error(
                analytic[f"{layer.name}.{pname}"], _numeric(lambda _: objective(x), p, eps, x))
    return out


def _numeric(objective, arr: np.ndarray, eps: float, x) -> np.ndarray:
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = objective(x)
        flat[i] = old - eps
        fm = objective(x)
        flat[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return grad


def grad_check(target, input_shape, rng: SeededRng, eps: float = 1e-5, train: bool = False) -> float:
    """Maximum relative error over the input gradient and all trainable parameters."""
    return max(grad_check_detail(target, input_shape, rng, eps, train).values())


def loss_grad_check(loss, logits_shape, rng: SeededRng, eps: float = 1e-5) -> float:
    z = rng.normal(logits_shape) * 3.0
    if loss is sigmoid_bce:
        labels = rng.integers(0, 2, logits_shape[0])
    else:
        labels = rng.integers(0, logits_shape[1], logits_shape[0])
    _, dz = loss(z, labels)
    num = _numeric(lambda inp: loss(inp, labels)[0], z, eps, z)
    return relative_error(dz, num)
