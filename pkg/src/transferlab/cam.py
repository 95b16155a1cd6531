"""Class activation maps for GAP-headed models and heat-map overlays."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .imageio import Image, resize_bilinear_float, round_half_up_u8, write_pnm
from .layers import Dense, Dropout
from .models import Model


def _colormap() -> np.ndarray:
    t = np.arange(256) / 255.0
    low = t <= 0.5
    r = np.where(low, 0.0, 2 * t - 1)
    g = np.where(low, 2 * t, 2 - 2 * t)
    b = np.where(low, 1 - 2 * t, 0.0)
    return round_half_up_u8(np.stack([r, g, b], axis=1) * 255.0)


# 256 RGB triples, piecewise linear blue (0) -> green (127/128) -> red (255).
COLORMAP = _colormap()


def head_dense(model: Model) -> Dense:
    """The dense layer fed directly (up to dropout) by global average pooling."""
    rest = [l for l in model.layers[model.head_start:] if not isinstance(l, Dropout)]
    if len(rest) != 1 or not isinstance(rest[0], Dense):
        raise ValueError(f"{model.arch_id}: CAM needs a GAP -> dense head")
    return rest[0]


def class_weights(model: Model, class_index: int) -> np.ndarray:
    w = head_dense(model).params["W"]
    if w.shape[1] == 1:
        if class_index not in (0, 1):
            raise ValueError("binary head: class index must be 0 or 1")
        return w[:, 0] if class_index == 1 else -w[:, 0]
    return w[:, class_index]


def feature_maps(model: Model, x: np.ndarray) -> np.ndarray:
    """Eval-mode activations entering global average pooling, (K, h, w)."""
    head_dense(model)
    if x.ndim == 3:
        x = x[None]
    return model.predict(x, batch_size=1, stop=model.gap_index)[0]


def compute_cam(model: Model, x: np.ndarray, class_index: int, weights=None) -> np.ndarray:
    """Raw map sum_k w[k, c] * f_k(y, x); the dense bias is not included.

    For a binary (single logit) head, class 1 uses the logit weights and
    class 0 their negation.
    """
    fmaps = feature_maps(model, x).astype(np.float64)
    w = class_weights(model, class_index) if weights is None else np.asarray(weights)
    return np.tensordot(w.astype(np.float64), fmaps, axes=(0, 0))


def normalize(raw: np.ndarray) -> np.ndarray:
    lo, hi = float(raw.min()), float(raw.max())
    if hi == lo:
        return np.zeros_like(raw, dtype=np.float64)
    return (raw - lo) / (hi - lo)


def heatmap(raw: np.ndarray, height: int, width: int) -> np.ndarray:
    """Min-max normalised and bilinearly upsampled map in [0, 1]."""
    return np.clip(resize_bilinear_float(normalize(raw), height, width), 0.0, 1.0)


def colorize(heat: np.ndarray) -> np.ndarray:
    return COLORMAP[np.floor(heat * 255.0 + 0.5).astype(np.int64)]


def render_heatmap_overlay(raw: np.ndarray, image: Image, alpha: float = 0.4, out_path=None) -> Image:
    """Original and heat-map overlay side by side (2W x H, RGB); written as PPM if ``out_path``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be within [0, 1]")
    base = image.pixels if image.channels == 3 else np.repeat(image.pixels[:, :, None], 3, axis=2)
    color = colorize(heatmap(raw, image.height, image.width))
    blend = round_half_up_u8((1.0 - alpha) * base.astype(np.float64) + alpha * color.astype(np.float64))
    out = Image(np.concatenate([base, blend], axis=1))
    if out_path is not None:
        write_pnm(out, Path(out_path))
    return out


def column_mass_ratio(heat: np.ndarray, columns, band: int = 2) -> float:
    """Mean column mass within ``band`` px of the given columns over the mean elsewhere."""
    mass = heat.sum(axis=0)
    on = np.zeros(mass.shape[0], dtype=bool)
    for c in columns:
        on[max(0, int(c) - band):int(c) + band + 1] = True
    if on.all() or not on.any():
        raise ValueError("need both on- and off-column regions")
    off = mass[~on].mean()
    return float(mass[on].mean() / off) if off > 0 else float("inf")


def write_colormap_table(path) -> None:
    lines = ["# index r g b  (blue -> green -> red, piecewise linear)"]
    lines += [f"{i} {r} {g} {b}" for i, (r, g, b) in enumerate(COLORMAP)]
    Path(path).write_text("\n".join(lines) + "\n")
