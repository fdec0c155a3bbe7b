"""Synthetic corpus planning, preprocessing and cached slide records.

A corpus is a seeded list of slide plans split into train/val. Each plan is
one of five kinds:

* ``large``: a large lesion, visible only at patch resolution (V)
* ``zoned``: a small lesion inside a tinted reaction zone; at patch level
  it matches a decoy cluster and at thumbnail level a decoy halo, so only
  the two streams together separate it
* ``decoy_halo`` / ``decoy_cluster``: the matching negatives
* ``plain``: a negative with nothing planted

Preprocessing a slide sifts its patches, crops to the kept bounding box and
builds the thumbnail matrix over the same region; encoding adds the
embedding matrices. The result is a :class:`SlideRecord`.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..slide import (
    SynthConfig,
    ThumbnailMatrix,
    build_thumbnail_matrix,
    crop_bounding_box,
    generate_synthetic_slide,
    pad_pair,
    sift_patches,
)
from .artifacts import load_bundle, save_bundle

log = logging.getLogger(__name__)

KINDS = ("large", "zoned", "decoy_halo", "decoy_cluster", "plain")
STORED_LEVELS = 4  # thumbnails keep levels 0..3; models slice the first 3L channels


@dataclass
class CorpusConfig:
    n_train: int = 200
    n_val: int = 50
    seed: int = 0
    extent: int = 4096
    tile_size: int = 512
    positive_fraction: float = 0.5
    large_fraction: float = 0.3  # share of positives with a large, zone-free lesion
    large_density: tuple = (0.03, 0.06)
    small_radius: tuple = (80.0, 140.0)
    decoy_halo_fraction: float = 0.45  # shares of negatives
    decoy_cluster_fraction: float = 0.45
    patch_size: int = 256
    k: int = 128

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class SlidePlan:
    slide_id: str
    split: str
    kind: str
    synth: SynthConfig

    @property
    def label(self) -> int:
        return int(self.kind in ("large", "zoned"))


def _split_counts(n: int, fractions) -> list[int]:
    raw = [n * f for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    order = np.argsort([-(r - c) for r, c in zip(raw, counts)], kind="stable")
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def plan_corpus(cfg: CorpusConfig) -> list[SlidePlan]:
    """Deterministic slide plans; each split is balanced to the configured mix."""
    rng = np.random.default_rng(cfg.seed)
    plans = []
    serial = 0
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val)):
        n_pos, n_neg = _split_counts(n, [cfg.positive_fraction, 1 - cfg.positive_fraction])
        pos = _split_counts(n_pos, [cfg.large_fraction, 1 - cfg.large_fraction])
        neg_plain = max(0.0, 1 - cfg.decoy_halo_fraction - cfg.decoy_cluster_fraction)
        neg = _split_counts(n_neg, [cfg.decoy_halo_fraction, cfg.decoy_cluster_fraction, neg_plain])
        kinds = ["large"] * pos[0] + ["zoned"] * pos[1] + ["decoy_halo"] * neg[0] + ["decoy_cluster"] * neg[1] + ["plain"] * neg[2]
        kinds = [kinds[i] for i in rng.permutation(len(kinds))]
        for kind in kinds:
            seed = int(rng.integers(2**31 - 1))
            sid = f"{split}-{serial:04d}"
            serial += 1
            base = dict(extent=cfg.extent, tile_size=cfg.tile_size, seed=seed, slide_id=sid)
            if kind == "large":
                synth = SynthConfig(lesion_density=float(rng.uniform(*cfg.large_density)), **base)
            elif kind == "zoned":
                synth = SynthConfig(lesion_density=0.001, lesion_radius=float(rng.uniform(*cfg.small_radius)), halo=True, **base)
            elif kind == "decoy_halo":
                synth = SynthConfig(decoy_halo=True, **base)
            elif kind == "decoy_cluster":
                synth = SynthConfig(decoy_cluster=True, **base)
            else:
                synth = SynthConfig(**base)
            plans.append(SlidePlan(sid, split, kind, synth))
    return plans


@dataclass
class SlideRecord:
    """Everything a classifier needs about one slide, at stored resolution."""

    slide_id: str
    split: str
    kind: str
    label: int
    thumbnail: np.ndarray  # (3 * STORED_LEVELS, Ht, Wt) over the crop region
    embeddings: dict  # encoding mode -> (C, H, W)
    mask: np.ndarray  # (H, W) observed cells
    offset: tuple  # crop origin in patch units
    patch_size: int
    k: int
    lesions: list = field(default_factory=list)  # [(cy, cx, r)] in slide pixels

    @property
    def pixel_count(self) -> int:
        """Slide pixels inside the cropped region."""
        h, w = self.mask.shape
        return int(h * w * self.patch_size**2)

    def inputs(self, levels: int = 3, mode: str = "separated"):
        """Aligned, padded (T, V, mask) for a model using ``levels`` levels."""
        if mode not in self.embeddings:
            raise KeyError(f"record {self.slide_id} has no {mode!r} embedding; available {sorted(self.embeddings)}")
        t = self.thumbnail[: 3 * levels]
        return pad_pair(t, self.embeddings[mode], self.mask)

    def lesion_cells(self, shape) -> np.ndarray:
        """Boolean map over thumbnail cells covered by the manifest lesions.

        A cell is inside when its centre lies in a lesion disk; a lesion
        smaller than a cell claims the cell holding its centre.
        """
        h, w = shape
        y0 = self.offset[0] * self.patch_size
        x0 = self.offset[1] * self.patch_size
        ys = y0 + (np.arange(h) + 0.5) * self.k
        xs = x0 + (np.arange(w) + 0.5) * self.k
        out = np.zeros((h, w), dtype=bool)
        for cy, cx, r in self.lesions:
            out |= (ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2 <= r * r
            i, j = int((cy - y0) // self.k), int((cx - x0) // self.k)
            if 0 <= i < h and 0 <= j < w:
                out[i, j] = True
        return out

    def save(self, path) -> Path:
        arrays = {"thumbnail": self.thumbnail, "mask": self.mask}
        for mode, v in sorted(self.embeddings.items()):
            arrays[f"embedding/{mode}"] = v
        meta = dict(slide_id=self.slide_id, split=self.split, kind=self.kind, label=self.label,
                    offset=list(self.offset), patch_size=self.patch_size, k=self.k,
                    lesions=[list(map(float, les)) for les in self.lesions])
        return save_bundle(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "SlideRecord":
        arrays, meta = load_bundle(path)
        emb = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("embedding/")}
        return cls(meta["slide_id"], meta["split"], meta["kind"], int(meta["label"]), arrays["thumbnail"], emb,
                   arrays["mask"], tuple(meta["offset"]), int(meta["patch_size"]), int(meta["k"]),
                   [tuple(x) for x in meta["lesions"]])


@dataclass
class Preprocessed:
    grid: object  # cropped PatchGrid (offset set)
    full_grid: object
    thumbnail: ThumbnailMatrix


def preprocess_slide(slide, patch_size: int = 256, k: int = 128, levels: int = STORED_LEVELS) -> Preprocessed:
    """Sift, crop to kept patches and build the thumbnail over the crop."""
    full = sift_patches(slide, patch_size)
    cropped, (r0, c0) = crop_bounding_box(full)
    h, w = cropped.shape
    region = (r0 * patch_size, c0 * patch_size, h * patch_size, w * patch_size)
    thumb = build_thumbnail_matrix(slide, k, list(range(levels)), region=region)
    return Preprocessed(cropped, full, thumb)


def build_record(plan: SlidePlan, slide, pre: Preprocessed, encoded: dict) -> SlideRecord:
    lesions = [(les.cy, les.cx, les.r) for les in slide.manifest.lesions]
    return SlideRecord(plan.slide_id, plan.split, plan.kind, plan.label, pre.thumbnail.data,
                       {m: e.data for m, e in encoded.items()}, pre.grid.kept.astype(np.float32),
                       tuple(pre.grid.offset), pre.grid.patch_size, pre.thumbnail.k, lesions)


def render(plan: SlidePlan):
    return generate_synthetic_slide(plan.synth)


def load_records(directory) -> list[SlideRecord]:
    paths = sorted(Path(directory).glob("*.rec"))
    return [SlideRecord.load(p) for p in paths]
