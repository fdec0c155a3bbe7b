"""Grad-CAM localization scoring against planted lesion geometry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autograd import Tensor
from ..dsnet import grad_cam
from .train import DataSpec


@dataclass
class LocalizationEntry:
    slide_id: str
    kind: str
    inside: float | None  # mean CAM over lesion cells
    outside: float | None  # mean CAM over the other cells of the slide region
    hit: bool


def slide_cam(model, record, spec: DataSpec = DataSpec()) -> np.ndarray:
    """CAM over the record's unpadded thumbnail grid, values in [0, 1]."""
    t, v, m = record.inputs(spec.levels, spec.mode)
    cfg = getattr(model, "config", None)
    tt = Tensor(t[None]) if getattr(cfg, "use_thumbnail", True) else None
    vv = Tensor(v[None]) if getattr(cfg, "use_embedding", True) else None
    cam = grad_cam(model, tt, vv, m[None, None])[0]
    h, w = record.thumbnail.shape[1:]
    return cam[:h, :w]


def localization_entry(model, record, spec: DataSpec = DataSpec()) -> LocalizationEntry:
    cam = slide_cam(model, record, spec)
    inside = record.lesion_cells(cam.shape)
    if not inside.any() or inside.all():
        return LocalizationEntry(record.slide_id, record.kind, None, None, False)
    a = float(cam[inside].mean())
    b = float(cam[~inside].mean())
    return LocalizationEntry(record.slide_id, record.kind, a, b, a > b)


def localization_scores(model, records, spec: DataSpec = DataSpec()) -> list[LocalizationEntry]:
    """One entry per positive record with lesion geometry."""
    return [localization_entry(model, r, spec) for r in records if r.label == 1 and r.lesions]


def hit_rate(entries) -> float:
    return float(np.mean([e.hit for e in entries])) if entries else 0.0
