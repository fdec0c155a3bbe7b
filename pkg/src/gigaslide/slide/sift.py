"""Patch sifting by run-length token counts, and bounding-box cropping."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from skimage.filters import threshold_otsu

KEPT, SIFTED, OUT_OF_BBOX = 0, 1, 2
QUANT_LEVELS = 32


class EmptySlideError(ValueError):
    """No patch survived sifting."""


def quantize_gray(rgb: np.ndarray, levels: int = QUANT_LEVELS) -> np.ndarray:
    """Channel-mean grayscale quantized to ``levels`` bins over [0, 255]."""
    gray = rgb.astype(np.float32).mean(axis=-1)
    return np.minimum((gray * (levels / 256.0)).astype(np.int16), levels - 1)


def rle_token_count(patch: np.ndarray, levels: int = QUANT_LEVELS) -> int:
    """Number of row-major runs after quantization; runs never wrap rows."""
    q = quantize_gray(patch, levels) if patch.ndim == 3 else np.asarray(patch)
    return int(q.shape[0] + np.count_nonzero(q[:, 1:] != q[:, :-1]))


def _strip_tokens(q: np.ndarray, size: int) -> np.ndarray:
    """Token counts of each ``size``-wide patch across one quantized strip."""
    change = (q[:, 1:] != q[:, :-1]).astype(np.int32)
    change = np.concatenate([np.ones((q.shape[0], 1), np.int32), change], axis=1)
    change[:, ::size] = 1  # each patch row starts a new run
    return change.reshape(q.shape[0], -1, size).sum(axis=(0, 2))


@dataclass
class PatchGrid:
    """Per-patch statistics over a slide (or a cropped window of one)."""

    patch_size: int
    token_count: np.ndarray  # (rows, cols) int
    mean_intensity: np.ndarray  # (rows, cols) float, grayscale 0..255
    status: np.ndarray  # (rows, cols) int8 of KEPT / SIFTED / OUT_OF_BBOX
    threshold: float
    offset: tuple = (0, 0)  # (row, col) of this grid inside the full slide grid

    @property
    def shape(self) -> tuple[int, int]:
        return self.status.shape

    @property
    def kept(self) -> np.ndarray:
        return self.status == KEPT

    def rethreshold(self, threshold: float) -> "PatchGrid":
        status = np.where(self.status == OUT_OF_BBOX, OUT_OF_BBOX, np.where(self.token_count > threshold, KEPT, SIFTED))
        return replace(self, status=status.astype(np.int8), threshold=float(threshold))


def auto_threshold(counts: np.ndarray, patch_size: int) -> float:
    """Two-class (Otsu) split of the log token-count histogram.

    Counts span orders of magnitude (flat glass sits at exactly S), so the
    split is done on a log scale. Flat patches (one run per row) are never
    kept, so the threshold is at least ``patch_size``.
    """
    c = np.asarray(counts, dtype=np.float64).ravel()
    if c.size == 0 or c.min() == c.max():
        return float(max(c.max() if c.size else patch_size, patch_size))
    return float(max(np.exp(threshold_otsu(np.log(c), nbins=256)), patch_size))


def sift_patches(slide, patch_size: int = 256, threshold: float | None = None, levels: int = QUANT_LEVELS) -> PatchGrid:
    """Token counts and keep/sift status for every S x S patch of ``slide``.

    A patch is kept iff its token count exceeds the threshold. Partial
    patches at the right/bottom edge are padded with blank white.
    """
    s = patch_size
    rows, cols = -(-slide.height // s), -(-slide.width // s)
    counts = np.zeros((rows, cols), dtype=np.int64)
    means = np.zeros((rows, cols), dtype=np.float64)
    for r in range(rows):
        strip = slide.read_region(r * s, 0, s, cols * s)
        q = quantize_gray(strip, levels)
        counts[r] = _strip_tokens(q, s)
        means[r] = strip.astype(np.float32).mean(axis=-1).reshape(s, cols, s).mean(axis=(0, 2))
    thr = auto_threshold(counts, s) if threshold is None else float(threshold)
    status = np.where(counts > thr, KEPT, SIFTED).astype(np.int8)
    return PatchGrid(s, counts, means, status, thr)


def crop_bounding_box(grid: PatchGrid) -> tuple[PatchGrid, tuple[int, int]]:
    """Tightest sub-grid holding every kept patch, and its (row, col) offset."""
    ys, xs = np.nonzero(grid.kept)
    if ys.size == 0:
        raise EmptySlideError("empty slide: no kept patches")
    r0, r1, c0, c1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    sub = lambda a: a[r0:r1, c0:c1].copy()  # noqa: E731
    cropped = PatchGrid(
        grid.patch_size,
        sub(grid.token_count),
        sub(grid.mean_intensity),
        sub(grid.status),
        grid.threshold,
        (grid.offset[0] + int(r0), grid.offset[1] + int(c0)),
    )
    return cropped, (int(r0), int(c0))


def mark_outside(grid: PatchGrid, offset, shape) -> PatchGrid:
    """Copy of the full ``grid`` with cells outside the crop marked OUT_OF_BBOX."""
    status = np.full(grid.shape, OUT_OF_BBOX, dtype=np.int8)
    r0, c0 = offset
    status[r0 : r0 + shape[0], c0 : c0 + shape[1]] = grid.status[r0 : r0 + shape[0], c0 : c0 + shape[1]]
    return replace(grid, status=status)
