"""Synthetic planted-lesion slides.

A slide is blank glass around an elliptical tissue section. Tissue is pink
stroma with a smooth low-frequency texture; "cellular" areas of it are
packed with small dark nuclei. Positive slides carry one or more lesion
disks where nuclei are larger, irregular and sparser, so their average
darkness stays close to normal tissue and the difference only shows at
patch resolution. Some lesions sit in a nucleus-free zone whose outer
annulus is tinted (a halo visible on thumbnails but sifted out at patch
level). Negatives may carry decoys: a tinted zone around ordinary cellular
tissue, or a small cluster of lesion-like nuclei in an untinted zone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .store import GLASS_RGB, ArraySlide, Lesion, SlideManifest

STROMA_RGB = np.array([226.0, 168.0, 204.0])
HALO_RGB = np.array([214.0, 170.0, 132.0])  # yellow-brown tint, distinct in hue from nuclei
NUCLEUS_RGB = np.array([92.0, 56.0, 136.0])
ATYPICAL_RGB = np.array([86.0, 62.0, 150.0])
DECOY_RADIUS = (80.0, 140.0)
ZONE_GAP = 280.0  # nucleus-free margin around a zoned centre, wider than a patch
ZONE_WIDTH = 320.0  # tinted annulus beyond the margin
HALO_ALPHA = 0.75
LESION_SPACING = 2.2  # relative to normal spacing; keeps area-averaged darkness near normal cellular tissue


@dataclass
class SynthConfig:
    extent: int = 4096
    tile_size: int = 512
    lesion_density: float = 0.0  # fraction of tissue area covered by lesions; 0 = negative
    seed: int = 0
    halo: bool = False  # surround each lesion with a tinted nucleus-free zone
    lesion_radius: float | None = None  # overrides the density-derived radius
    decoy_halo: bool = False  # a halo without a lesion
    decoy_cluster: bool = False  # a small patch of lesion-like nuclei
    nucleus_spacing: float = 17.0
    tissue_scale: tuple = (0.26, 0.47)  # ellipse semi-axis range as a fraction of extent
    slide_id: str | None = None


FIELD_STEP = 4  # smooth fields and the tissue outline are computed on a 4x coarser grid


def _upscale(a: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(a, FIELD_STEP, axis=0), FIELD_STEP, axis=1)


def _smooth_field(rng, extent: int, coarse: int) -> np.ndarray:
    """Zero-mean, unit-ish smooth noise at full resolution."""
    base = ndimage.gaussian_filter(rng.standard_normal((coarse, coarse)), 1.5, mode="wrap")
    base = (base - base.mean()) / (base.std() + 1e-12)
    n = extent // FIELD_STEP
    return _upscale(ndimage.zoom(base.astype(np.float32), n / coarse, order=1, mode="nearest", grid_mode=True))


def _tissue_mask(rng, extent: int, scale) -> np.ndarray:
    extent_full = extent
    extent = extent // FIELD_STEP
    a, b = rng.uniform(*scale, size=2) * extent
    cy = extent / 2 + rng.uniform(-1, 1) * (extent / 2 - b) * 0.4
    cx = extent / 2 + rng.uniform(-1, 1) * (extent / 2 - a) * 0.4
    theta = rng.uniform(0, np.pi)
    wobble = rng.standard_normal(4) * 0.04
    ys, xs = np.ogrid[:extent, :extent]
    dy, dx = ys - cy, xs - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    ang = np.arctan2(v, u)
    radius = 1.0 + sum(w * np.cos((k + 2) * ang) for k, w in enumerate(wobble))
    return _upscale((u / a) ** 2 + (v / b) ** 2 <= radius**2)[:extent_full, :extent_full]


def _stamp(img, cy, cx, ry, rx, angle, rgb, grain, rng):
    """Blend one anti-aliased elliptical nucleus into ``img`` in place."""
    h, w, _ = img.shape
    rmax = int(np.ceil(max(ry, rx))) + 2
    y0, y1 = max(int(cy) - rmax, 0), min(int(cy) + rmax + 1, h)
    x0, x1 = max(int(cx) - rmax, 0), min(int(cx) + rmax + 1, w)
    if y0 >= y1 or x0 >= x1:
        return
    ys = np.arange(y0, y1)[:, None] - cy
    xs = np.arange(x0, x1)[None, :] - cx
    c, s = np.cos(angle), np.sin(angle)
    u = (xs * c + ys * s) / rx
    v = (-xs * s + ys * c) / ry
    d = np.sqrt(u * u + v * v)
    alpha = np.clip((1.0 - d) * min(rx, ry) + 0.5, 0.0, 1.0)[..., None]
    tone = rgb * (1.0 + grain * rng.standard_normal((y1 - y0, x1 - x0, 1)))
    patch = img[y0:y1, x0:x1]
    patch *= 1.0 - alpha
    patch += alpha * tone


def _scatter(rng, region: np.ndarray, spacing: float, bbox=None) -> np.ndarray:
    """Jittered-grid centres restricted to ``region`` (boolean map)."""
    h, w = region.shape
    y0, x0, y1, x1 = bbox if bbox is not None else (0, 0, h, w)
    gy = np.arange(y0, y1, spacing)
    gx = np.arange(x0, x1, spacing)
    yy, xx = np.meshgrid(gy, gx, indexing="ij")
    yy = yy + rng.uniform(0, spacing, yy.shape)
    xx = xx + rng.uniform(0, spacing, xx.shape)
    yy, xx = yy.ravel(), xx.ravel()
    keep = (yy < h) & (xx < w)
    yy, xx = yy[keep], xx[keep]
    inside = region[yy.astype(int), xx.astype(int)]
    return np.stack([yy[inside], xx[inside]], axis=1)


def _place_disks(rng, tissue: np.ndarray, count: int, radius: float, avoid=()):
    """Centres inside tissue whose full disk lies in tissue (best effort)."""
    eroded = ndimage.binary_erosion(tissue[::16, ::16], iterations=max(int(radius // 16), 1))
    cand = np.argwhere(eroded) * 16 + 8
    if len(cand) == 0:
        cand = np.argwhere(tissue[::16, ::16]) * 16 + 8
    out = []
    for _ in range(count):
        for _attempt in range(50):
            cy, cx = cand[rng.integers(len(cand))]
            if all((cy - y) ** 2 + (cx - x) ** 2 > (radius + r + 64) ** 2 for y, x, r in list(avoid) + out):
                break
        out.append((float(cy), float(cx), float(radius)))
    return out


def _disk_map(extent, disks, grow=0.0) -> np.ndarray:
    m = np.zeros((extent, extent), dtype=bool)
    for cy, cx, r in disks:
        rr = r + grow
        y0, y1 = max(int(cy - rr), 0), min(int(cy + rr) + 1, extent)
        x0, x1 = max(int(cx - rr), 0), min(int(cx + rr) + 1, extent)
        ys, xs = np.ogrid[y0:y1, x0:x1]
        m[y0:y1, x0:x1] |= (ys - cy) ** 2 + (xs - cx) ** 2 <= rr * rr
    return m


def _draw_lesion_nuclei(img, rng, disks, region, spacing):
    for cy, cx, r in disks:
        bbox = (max(int(cy - r), 0), max(int(cx - r), 0), int(cy + r) + 1, int(cx + r) + 1)
        for y, x in _scatter(rng, region, spacing * LESION_SPACING, bbox):
            ry = rng.uniform(6.5, 10.0)
            _stamp(img, y, x, ry, ry * rng.uniform(1.3, 1.9), rng.uniform(0, np.pi), ATYPICAL_RGB, 0.12, rng)


def _tint_zone(img, tissue, disk, extent, gap, width):
    """Fade a tint into the annulus [r + gap, r + gap + width] around ``disk``.

    The tint strength follows a half sine across the annulus, so it is zero
    at both edges. Returns the full zone (disk grown by gap + width).
    """
    cy, cx, r = disk
    outer = r + gap + width
    zone = _disk_map(extent, [(cy, cx, outer)]) & tissue
    ys, xs = np.nonzero(zone)
    d = np.hypot(ys - cy, xs - cx)
    t = np.clip((d - r - gap) / width, 0.0, 1.0)
    alpha = (HALO_ALPHA * np.sin(np.pi * t))[:, None]
    img[ys, xs] = img[ys, xs] * (1.0 - alpha) + HALO_RGB * alpha
    return zone


def _clear_zone(extent, tissue, disk, gap, width):
    cy, cx, r = disk
    return _disk_map(extent, [(cy, cx, r + gap + width)]) & tissue


def generate_synthetic_slide(config: SynthConfig) -> ArraySlide:
    """Render a slide; identical configs give byte-identical pixels."""
    e = config.extent
    if e % config.tile_size:
        raise ValueError("extent must be a multiple of the tile size")
    rng = np.random.default_rng(config.seed)
    tissue = _tissue_mask(rng, e, config.tissue_scale)
    texture = _smooth_field(rng, e, 48)
    cellularity = _smooth_field(rng, e, 24)

    img = np.empty((e, e, 3), dtype=np.float32)
    img[:] = GLASS_RGB
    stroma = STROMA_RGB[None, :] + texture[tissue][:, None] * np.array([4.0, 6.0, 4.0])
    img[tissue] = stroma
    cellular = tissue & (cellularity > 0.05)

    n_lesions = 0
    lesions: list[tuple] = []
    tissue_area = float(tissue.sum())
    if config.lesion_density > 0:
        n_lesions = 1 if config.lesion_density < 0.06 else 2
        radius = np.sqrt(config.lesion_density * tissue_area / (np.pi * n_lesions))
        if config.lesion_radius is not None:
            radius = float(config.lesion_radius)
        margin = ZONE_GAP + ZONE_WIDTH if config.halo else 0.0
        lesions = [(cy, cx, radius) for cy, cx, _ in _place_disks(rng, tissue, n_lesions, radius + margin)]
    gap, width = ZONE_GAP, ZONE_WIDTH
    reach = gap + width

    def grown(disks):
        return [(cy, cx, r + reach) for cy, cx, r in disks]

    decoy_halo_disks, cluster_disks = [], []
    if config.decoy_halo:
        r = rng.uniform(*DECOY_RADIUS)
        placed = _place_disks(rng, tissue, 1, r + reach, avoid=grown(lesions))
        decoy_halo_disks = [(cy, cx, r) for cy, cx, _ in placed]
    if config.decoy_cluster:
        r = rng.uniform(*DECOY_RADIUS)
        placed = _place_disks(rng, tissue, 1, r + reach, avoid=grown(lesions + decoy_halo_disks))
        cluster_disks = [(cy, cx, r) for cy, cx, _ in placed]

    # Reaction zones: a lesion-sized centre inside a nucleus-free gap wider
    # than a patch, then an annulus of tinted stroma fading in and out. The
    # whole zone is flat stroma, so its patches are sifted out and the tint
    # only reaches the thumbnail. Decoy clusters get the same zone untinted;
    # decoy halos get the tinted zone around a plain cellular centre.
    zoned = (lesions if config.halo else []) + decoy_halo_disks + cluster_disks
    for d in zoned:
        cellular &= ~_clear_zone(e, tissue, d, gap, width)
    for d in (lesions if config.halo else []) + decoy_halo_disks:
        _tint_zone(img, tissue, d, e, gap, width)
    for d in decoy_halo_disks:
        cellular |= _disk_map(e, [d]) & tissue
    stromal_free = np.zeros_like(tissue)
    for d in zoned:
        stromal_free |= _disk_map(e, [(d[0], d[1], d[2] + gap)])

    lesion_map = _disk_map(e, lesions) if lesions else np.zeros_like(tissue)
    cluster_map = _disk_map(e, cluster_disks) if cluster_disks else np.zeros_like(tissue)
    normal_region = cellular & ~lesion_map & ~cluster_map
    sp = config.nucleus_spacing
    for y, x in _scatter(rng, normal_region, sp):
        r = rng.uniform(3.8, 5.2)
        _stamp(img, y, x, r, r * rng.uniform(1.0, 1.25), rng.uniform(0, np.pi), NUCLEUS_RGB, 0.06, rng)
    # sparse elongated stromal nuclei
    for y, x in _scatter(rng, tissue & ~cellular & ~lesion_map & ~stromal_free, sp * 6.5):
        _stamp(img, y, x, 1.8, 5.0, rng.uniform(0, np.pi), NUCLEUS_RGB, 0.0, rng)
    _draw_lesion_nuclei(img, rng, lesions, lesion_map & tissue, sp)
    _draw_lesion_nuclei(img, rng, cluster_disks, cluster_map & tissue, sp)

    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    label = 1 if lesions else 0
    manifest = SlideManifest(
        slide_id=config.slide_id or f"synth-{config.seed:06d}",
        width=e,
        height=e,
        tile_size=config.tile_size,
        magnification="synthetic-20x",
        label=label,
        lesions=[Lesion(cx=cx, cy=cy, r=r) for cy, cx, r in lesions],
        extras={
            "tissue_pixels": int(tissue_area),
            "halo": bool(config.halo and lesions),
            "decoy_halo": [list(d) for d in decoy_halo_disks],
            "decoy_cluster": [list(d) for d in cluster_disks],
            "seed": int(config.seed),
        },
    )
    return ArraySlide(image, manifest)
