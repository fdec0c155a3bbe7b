"""Deterministic report serialization: JSON, CSV and fixed-width text tables."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .artifacts import write_text


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return None if not np.isfinite(v) else float(repr(v))  # repr round-trips exactly
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def to_json(obj) -> str:
    """Canonical JSON: sorted keys, fixed separators, NaN/inf as null."""
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj) -> Path:
    return write_text(path, to_json(obj))


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, bool):
        return "yes" if v else ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def to_csv(rows: list[dict], columns=None) -> str:
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(c) is None else _clean(r.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, rows: list[dict], columns=None) -> Path:
    return write_text(path, to_csv(rows, columns))


def text_table(rows: list[dict], columns=None, title: str | None = None) -> str:
    """Fixed-width table; numbers right-aligned."""
    if not rows:
        return (title + "\n" if title else "") + "(empty)\n"
    columns = list(columns or rows[0].keys())
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    numeric = [all(isinstance(r.get(c), (int, float)) or r.get(c) is None for r in rows) for c in columns]

    def line(vals):
        return "  ".join(v.rjust(w) if num else v.ljust(w) for v, w, num in zip(vals, widths, numeric)).rstrip()

    out = []
    if title:
        out.append(title)
    out.append(line(columns))
    out.append("  ".join("-" * w for w in widths))
    out.extend(line(row) for row in cells)
    return "\n".join(out) + "\n"


def write_eval_report(directory, report, name: str = "eval") -> dict:
    """JSON report, per-slide CSV, ROC CSV and a ROC plot image."""
    d = Path(directory)
    paths = {
        "json": write_json(d / f"{name}.json", report.as_dict()),
        "slides": write_csv(d / f"{name}_slides.csv", report.entries),
        "roc": write_csv(d / f"{name}_roc.csv", [{"fpr": x, "tpr": y} for x, y in report.roc], ["fpr", "tpr"]),
    }
    if report.roc:
        paths["roc_png"] = save_roc_image(d / f"{name}_roc.png", report.roc)
    return paths


def save_roc_image(path, roc, size: int = 256) -> Path:
    """Plot a ROC step curve (and the chance diagonal) into a greyscale PNG."""
    from PIL import Image, ImageDraw

    img = Image.new("L", (size, size), 255)
    draw = ImageDraw.Draw(img)
    m = size - 1
    draw.line([(0, m), (m, 0)], fill=190)
    pts = [(x * m, (1 - y) * m) for x, y in roc]
    draw.line(pts, fill=0, width=2)
    img.save(path)
    return Path(path)


def save_heatmap(path, heat: np.ndarray, base: np.ndarray | None = None, alpha: float = 0.5) -> Path:
    """Write a [0, 1] heatmap as a red overlay (optionally over an RGB base in [0, 1])."""
    from PIL import Image

    h = np.clip(np.asarray(heat, dtype=np.float64), 0, 1)
    color = np.stack([h, np.zeros_like(h), 1 - h], axis=-1)
    if base is not None:
        color = (1 - alpha) * np.clip(base, 0, 1) + alpha * color
    Image.fromarray((color * 255).round().astype(np.uint8)).save(path)
    return Path(path)
