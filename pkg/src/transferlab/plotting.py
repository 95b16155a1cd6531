"""Learning-curve figure from a sweep CSV: mean line and min-max band per arch."""
from __future__ import annotations

import io
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiments import CSV_COLUMNS  # noqa: E402


class CSVFormatError(ValueError):
    pass


def read_sweep_csv(path) -> list[dict]:
    rows = []
    header = None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split(",")
        if header is None:
            if tuple(fields) != CSV_COLUMNS:
                raise CSVFormatError(f"{path}:{lineno}: unexpected header {line!r}")
            header = fields
            continue
        if len(fields) != len(header):
            raise CSVFormatError(f"{path}:{lineno}: {len(fields)} fields, header has {len(header)}")
        row = dict(zip(header, fields))
        try:
            row["samples_per_class"] = int(row["samples_per_class"])
            row["test_accuracy"] = float(row["test_accuracy"])
        except ValueError as exc:
            raise CSVFormatError(f"{path}:{lineno}: {exc}") from exc
        rows.append(row)
    if header is None:
        raise CSVFormatError(f"{path}: no header row")
    if not rows:
        raise CSVFormatError(f"{path}: no data rows")
    return rows


def curve_stats(rows) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    """arch -> (x, mean, min, max) over all trials/folds at each sample count."""
    groups: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    order = []
    for r in rows:
        if r["arch"] not in order:
            order.append(r["arch"])
        groups[r["arch"]][r["samples_per_class"]].append(r["test_accuracy"])
    out = {}
    for arch in order:
        xs = sorted(groups[arch])
        vals = [np.asarray(groups[arch][x]) for x in xs]
        out[arch] = (np.array(xs), np.array([v.mean() for v in vals]),
                     np.array([v.min() for v in vals]), np.array([v.max() for v in vals]))
    return out


def plot_csv(in_csv, out_path) -> Path:
    """Render the sweep learning curves; SVG output is byte-stable for a given CSV."""
    stats = curve_stats(read_sweep_csv(in_csv))
    out_path = Path(out_path)
    with plt.rc_context({"svg.hashsalt": "transferlab", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(6.4, 4.2))
        for arch, (x, mean, lo, hi) in stats.items():
            (line,) = ax.plot(x, mean, marker="o", ms=3, label=arch)
            ax.fill_between(x, lo, hi, color=line.get_color(), alpha=0.2, linewidth=0)
        ax.set_xlabel("training samples per class")
        ax.set_ylabel("test accuracy")
        ax.set_ylim(0.0, 1.0)
        ax.grid(alpha=0.3)
        ax.legend(loc="lower right")
        fig.tight_layout()
        buf = io.BytesIO()
        fmt = out_path.suffix.lstrip(".").lower() or "svg"
        meta = {"Date": None} if fmt == "svg" else None
        fig.savefig(buf, format=fmt, metadata=meta)
        plt.close(fig)
    out_path.write_bytes(buf.getvalue())
    return out_path
