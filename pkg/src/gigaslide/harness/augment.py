"""Geometric augmentation applied identically to T, V and the mask.

T is at twice the resolution of V, so every crop offset on T is doubled.
Only right-angle rotations are used, keeping the two grids aligned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentSpec:
    hflip: bool = False
    vflip: bool = False
    rot90: int = 0  # quarter turns, counter-clockwise
    crop: tuple = (0, 0, 0, 0)  # V cells dropped from (top, bottom, left, right)

    @property
    def is_identity(self) -> bool:
        return not (self.hflip or self.vflip or self.rot90 % 4 or any(self.crop))


def sample_augment(rng: np.random.Generator, v_shape, max_discard: int = 7, flips=True, rotations=True) -> AugmentSpec:
    """Random flips, quarter turn and crop; at most ``max_discard`` cells per axis."""
    h, w = v_shape
    dh = int(rng.integers(0, min(max_discard, h - 1) + 1)) if h > 1 else 0
    dw = int(rng.integers(0, min(max_discard, w - 1) + 1)) if w > 1 else 0
    top = int(rng.integers(0, dh + 1))
    left = int(rng.integers(0, dw + 1))
    return AugmentSpec(
        hflip=bool(flips and rng.random() < 0.5),
        vflip=bool(flips and rng.random() < 0.5),
        rot90=int(rng.integers(0, 4)) if rotations else 0,
        crop=(top, dh - top, left, dw - left),
    )


def _geometry(a: np.ndarray, spec: AugmentSpec, scale: int) -> np.ndarray:
    top, bottom, left, right = (c * scale for c in spec.crop)
    h, w = a.shape[-2:]
    a = a[..., top : h - bottom, left : w - right]
    if spec.hflip:
        a = a[..., :, ::-1]
    if spec.vflip:
        a = a[..., ::-1, :]
    if spec.rot90 % 4:
        a = np.rot90(a, spec.rot90 % 4, axes=(-2, -1))
    return np.ascontiguousarray(a)


def apply_augment(t: np.ndarray, v: np.ndarray, mask: np.ndarray, spec: AugmentSpec):
    """Transform (T (C, 2H, 2W), V (C, H, W), mask (H, W)) with one spec.

    If the crop would drop every observed cell it is skipped so a sample
    never loses all of its evidence.
    """
    if spec.is_identity:
        return t, v, mask
    if any(spec.crop):
        top, bottom, left, right = spec.crop
        h, w = mask.shape
        if mask[top : h - bottom, left : w - right].sum() == 0:
            spec = AugmentSpec(spec.hflip, spec.vflip, spec.rot90)
    return _geometry(t, spec, 2), _geometry(v, spec, 1), _geometry(mask, spec, 1)


def transform_cells(cells: np.ndarray, shape, spec: AugmentSpec) -> tuple[np.ndarray, tuple]:
    """Map (N, 2) V-cell coordinates through ``spec``; returns (cells, new shape)."""
    top, bottom, left, right = spec.crop
    h, w = shape[0] - top - bottom, shape[1] - left - right
    r = cells[:, 0] - top
    c = cells[:, 1] - left
    if spec.hflip:
        c = w - 1 - c
    if spec.vflip:
        r = h - 1 - r
    for _ in range(spec.rot90 % 4):
        r, c = w - 1 - c, r
        h, w = w, h
    return np.stack([r, c], axis=1), (h, w)
