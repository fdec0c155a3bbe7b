"""Multi-level thumbnail matrix and stream alignment padding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ThumbnailMatrix:
    """Stack of ``L`` aligned thumbnails, shape (3L, H, W), finest level first.

    Values are inverted intensities ``1 - rgb / 255`` so blank white
    (and zero padding) is 0.
    """

    data: np.ndarray
    levels: list
    k: int
    region: tuple  # (y0, x0, h, w) in slide pixels before padding

    @property
    def shape(self):
        return self.data.shape


def _level_list(levels) -> list:
    if isinstance(levels, int):
        if levels < 1:
            raise ValueError("need at least one thumbnail level")
        return list(range(levels))
    lv = sorted(int(a) for a in levels)
    if not lv or lv[0] < 0:
        raise ValueError("levels must be a nonempty set of nonnegative integers")
    return lv


def _block_mean(a: np.ndarray, f: int) -> np.ndarray:
    h, w = a.shape[:2]
    return a.reshape(h // f, f, w // f, f, *a.shape[2:]).mean(axis=(1, 3))


def build_thumbnail_matrix(slide, k: int = 128, levels=3, region=None, strip_rows: int | None = None) -> ThumbnailMatrix:
    """Area-average the slide by ``k * 2**a`` for each level ``a``, then
    nearest-upsample each by ``2**a`` back to the finest grid.

    ``region`` is (y0, x0, h, w) in slide pixels (default: whole slide). It
    is padded with blank white at the bottom/right up to a multiple of the
    coarsest factor, so every level lands on an exact grid.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    lv = _level_list(levels)
    y0, x0, h, w = region if region is not None else (0, 0, slide.height, slide.width)
    unit = k * 2 ** max(lv)
    hp, wp = -(-h // unit) * unit, -(-w // unit) * unit
    # level-0 means, accumulated strip by strip to bound memory
    step = strip_rows or max(k, (1 << 22) // max(wp, 1) // k * k)
    base = np.empty((hp // k, wp // k, 3), dtype=np.float64)
    for r in range(0, hp, step):
        rr = min(step, hp - r)
        block = slide.read_region(y0 + r, x0, rr, wp).astype(np.float64)
        base[r // k : (r + rr) // k] = _block_mean(block, k)
    base = 1.0 - base / 255.0
    chans = []
    for a in lv:
        f = 2**a
        coarse = _block_mean(base, f) if f > 1 else base
        chans.append(np.repeat(np.repeat(coarse, f, axis=0), f, axis=1))
    data = np.concatenate([c.transpose(2, 0, 1) for c in chans], axis=0).astype(np.float32)
    return ThumbnailMatrix(data, lv, k, (y0, x0, h, w))


def aligned_extent(v_extent: int, t_extent: int, multiple: int = 4) -> int:
    """Embedding-grid extent after padding: a multiple of ``multiple`` that
    also leaves room for a thumbnail of ``t_extent`` at twice the resolution."""
    need = max(v_extent, -(-t_extent // 2))
    return -(-need // multiple) * multiple


def pad_pair(t: np.ndarray, v: np.ndarray, mask: np.ndarray, multiple: int = 4):
    """Zero-pad (T, V, mask) at the bottom/right so T is exactly 2x V and V
    is a multiple of ``multiple`` in both directions."""
    hv = aligned_extent(v.shape[1], t.shape[1], multiple)
    wv = aligned_extent(v.shape[2], t.shape[2], multiple)
    vp = np.zeros((v.shape[0], hv, wv), dtype=v.dtype)
    vp[:, : v.shape[1], : v.shape[2]] = v
    mp = np.zeros((hv, wv), dtype=mask.dtype)
    mp[: mask.shape[0], : mask.shape[1]] = mask
    tp = np.zeros((t.shape[0], 2 * hv, 2 * wv), dtype=t.dtype)
    tp[:, : t.shape[1], : t.shape[2]] = t
    return tp, vp, mp
