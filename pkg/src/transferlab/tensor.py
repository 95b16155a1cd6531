"""Dense numeric kernels and the counter-based RNG everything else builds on.

Tensors are plain ``numpy.ndarray`` objects in row-major NCHW layout
(rank 4) or (rows, cols) layout (rank 2).  Training runs in float32,
gradient verification in float64.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

DEFAULT_DTYPE = np.float32

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_CHILD_SALT = 0xD1B54A32D192ED03
_MASK64 = (1 << 64) - 1


class NumericError(ArithmeticError):
    """Raised when a framework operation produces NaN or Inf."""


def check_finite(t: np.ndarray, where: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise NumericError(f"non-finite values in {where}")
    return t


# --------------------------------------------------------------------------
# splitmix64 counter RNG
# --------------------------------------------------------------------------

def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def child_seed(seed: int, i: int) -> int:
    """Derive the seed of the ``i``-th child stream of ``seed`` (pure function)."""
    base = np.array([(seed + (i + 1) * 0x9E3779B97F4A7C15) & _MASK64], dtype=np.uint64)
    z = _mix(base) ^ np.uint64(_CHILD_SALT)
    return int(_mix(z)[0])


class SeededRng:
    """splitmix64 generator addressed by an explicit counter.

    Draw ``i`` (0-based, counted from construction) is
    ``mix(seed + (i + 1) * 0x9E3779B97F4A7C15)``, i.e. the standard
    sequential splitmix64 stream, but computed in vectorised form.
    Uniforms take the top 53 bits; Gaussians use Box-Muller on pairs.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, counter={self.counter})"

    def spawn(self, i: int) -> "SeededRng":
        return SeededRng(child_seed(self.seed, i))

    def get_state(self) -> tuple[int, int]:
        return self.seed, self.counter

    def set_state(self, state: tuple[int, int]) -> None:
        self.seed, self.counter = state

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix(np.uint64(self.seed) + idx * _GOLDEN)

    def uniform(self, shape=1, dtype=np.float64) -> np.ndarray:
        shape = _as_shape(shape)
        n = math.prod(shape)
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return u.reshape(shape).astype(dtype, copy=False)

    def normal(self, shape=1, dtype=np.float64) -> np.ndarray:
        shape = _as_shape(shape)
        n = math.prod(shape)
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape).astype(dtype, copy=False)

    def integers(self, low: int, high: int, shape=1) -> np.ndarray:
        """Integers in ``[low, high)``."""
        if high <= low:
            raise ValueError("empty integer range")
        u = self.uniform(shape)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def randint(self, low: int, high: int) -> int:
        """Single integer in the closed range ``[low, high]``."""
        return int(self.integers(low, high + 1, 1)[0])

    def random(self) -> float:
        return float(self.uniform(1)[0])

    def permutation(self, n: int) -> np.ndarray:
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        return np.argsort(self.uniform(n), kind="stable")


def _as_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)


def rng_draw(rng: SeededRng, dist: str, n: int, dtype=np.float64) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    if dist == "uniform":
        return rng.uniform(n, dtype)
    if dist == "gaussian":
        return rng.normal(n, dtype)
    raise ValueError(f"unknown distribution {dist!r}")


# --------------------------------------------------------------------------
# GEMM / im2col
# --------------------------------------------------------------------------

def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("gemm expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"gemm shape mismatch: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def conv_output_size(size: int, k: int, s: int, p: int) -> int:
    span = size + 2 * p - k
    if span < 0 or span % s:
        raise ValueError(f"non-integral output extent for size={size} k={k} s={s} p={p}")
    return span // s + 1


def im2col_batch(x: np.ndarray, k: int, s: int = 1, p: int = 0) -> np.ndarray:
    """(N, C, H, W) -> (N, C*k*k, Ho*Wo); row order is (c, ky, kx)."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, k, s, p)
    wo = conv_output_size(w, k, s, p)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else np.ascontiguousarray(x)
    sn, sc, sh, sw = xp.strides
    view = as_strided(xp, (n, c, k, k, ho, wo), (sn, sc, sh, sw, sh * s, sw * s), writeable=False)
    return view.reshape(n, c * k * k, ho * wo)


def col2im_batch(cols: np.ndarray, x_shape, k: int, s: int = 1, p: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col_batch`: scatter-add columns back to an input-shaped array."""
    n, c, h, w = x_shape
    ho = conv_output_size(h, k, s, p)
    wo = conv_output_size(w, k, s, p)
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for ky in range(k):
        for kx in range(k):
            out[:, :, ky:ky + s * ho:s, kx:kx + s * wo:s] += cols[:, :, ky, kx]
    if p:
        out = out[:, :, p:p + h, p:p + w]
    return np.ascontiguousarray(out)


def im2col(x: np.ndarray, k: int, s: int = 1, p: int = 0) -> np.ndarray:
    """Single image (1, C, H, W) -> (C*k*k, Ho*Wo)."""
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError("im2col expects a (1, C, H, W) tensor; use im2col_batch for batches")
    return im2col_batch(x, k, s, p)[0]
