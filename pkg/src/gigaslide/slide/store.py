"""On-disk slide store: lossless PNG tiles plus one JSON manifest per slide."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

GLASS_RGB = (242, 242, 244)
OUTSIDE_RGB = (255, 255, 255)  # reads beyond the slide extent; inverts to exactly 0
MANIFEST_NAME = "manifest.json"


class SlideReadError(IOError):
    """A tile could not be read; ``tile_id`` names it."""

    def __init__(self, tile_id: str, reason: str):
        super().__init__(f"tile {tile_id}: {reason}")
        self.tile_id = tile_id


@dataclass
class Lesion:
    """Disk in slide pixel coordinates (x = column, y = row)."""

    cx: float
    cy: float
    r: float
    shape: str = "disk"

    def contains(self, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        return (ys - self.cy) ** 2 + (xs - self.cx) ** 2 <= self.r**2


@dataclass
class SlideManifest:
    slide_id: str
    width: int
    height: int
    tile_size: int
    magnification: str = "synthetic"
    label: int | None = None
    lesions: list = field(default_factory=list)
    tiles: dict = field(default_factory=dict)  # "row,col" -> relative path
    extras: dict = field(default_factory=dict)

    @property
    def tile_grid(self) -> tuple[int, int]:
        t = self.tile_size
        return -(-self.height // t), -(-self.width // t)

    def check_coverage(self) -> None:
        """Every pixel must belong to exactly one listed tile."""
        rows, cols = self.tile_grid
        want = {f"{r},{c}" for r in range(rows) for c in range(cols)}
        if set(self.tiles) != want:
            missing = sorted(want - set(self.tiles))[:5]
            raise ValueError(f"tile table does not cover the slide; missing {missing}")

    def lesion_objects(self) -> list[Lesion]:
        return [Lesion(**d) if isinstance(d, dict) else d for d in self.lesions]

    def to_json(self) -> str:
        d = asdict(self)
        d["lesions"] = [asdict(l) if isinstance(l, Lesion) else dict(l) for l in self.lesions]
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SlideManifest":
        d = json.loads(text)
        d["lesions"] = [Lesion(**l) for l in d.get("lesions", [])]
        return cls(**d)


class ArraySlide:
    """In-memory slide: a (H, W, 3) uint8 array with its manifest."""

    def __init__(self, image: np.ndarray, manifest: SlideManifest):
        if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
            raise ValueError(f"expected (H, W, 3) uint8 image, got {image.shape} {image.dtype}")
        self.image = image
        self.manifest = manifest

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def read_region(self, y0: int, x0: int, h: int, w: int) -> np.ndarray:
        return _padded_crop(self.image, y0, x0, h, w)


def _padded_crop(img: np.ndarray, y0, x0, h, w) -> np.ndarray:
    out = np.empty((h, w, 3), dtype=np.uint8)
    out[:] = OUTSIDE_RGB
    ys, xs = max(y0, 0), max(x0, 0)
    ye, xe = min(y0 + h, img.shape[0]), min(x0 + w, img.shape[1])
    if ye > ys and xe > xs:
        out[ys - y0 : ye - y0, xs - x0 : xe - x0] = img[ys:ye, xs:xe]
    return out


class StoredSlide:
    """Slide backed by a tile directory; tiles are decoded on demand."""

    def __init__(self, root):
        self.root = Path(root)
        try:
            self.manifest = SlideManifest.from_json((self.root / MANIFEST_NAME).read_text())
        except FileNotFoundError:
            raise SlideReadError("manifest", f"no manifest in {self.root}") from None
        self._cache: dict[str, np.ndarray] = {}

    @property
    def height(self) -> int:
        return self.manifest.height

    @property
    def width(self) -> int:
        return self.manifest.width

    def tile(self, row: int, col: int) -> np.ndarray:
        key = f"{row},{col}"
        if key in self._cache:
            return self._cache[key]
        rel = self.manifest.tiles.get(key)
        if rel is None:
            raise SlideReadError(key, "not listed in manifest")
        try:
            with Image.open(self.root / rel) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except (OSError, ValueError) as exc:
            raise SlideReadError(key, str(exc)) from exc
        if len(self._cache) > 64:
            self._cache.clear()
        self._cache[key] = arr
        return arr

    def read_region(self, y0: int, x0: int, h: int, w: int) -> np.ndarray:
        t = self.manifest.tile_size
        out = np.empty((h, w, 3), dtype=np.uint8)
        out[:] = OUTSIDE_RGB
        rows, cols = self.manifest.tile_grid
        for r in range(max(y0 // t, 0), min(-(-(y0 + h) // t), rows)):
            for c in range(max(x0 // t, 0), min(-(-(x0 + w) // t), cols)):
                tile = self.tile(r, c)
                ty, tx = r * t, c * t
                ys, xs = max(y0, ty), max(x0, tx)
                ye, xe = min(y0 + h, ty + tile.shape[0]), min(x0 + w, tx + tile.shape[1])
                if ye > ys and xe > xs:
                    out[ys - y0 : ye - y0, xs - x0 : xe - x0] = tile[ys - ty : ye - ty, xs - tx : xe - tx]
        return out

    def to_array(self) -> ArraySlide:
        return ArraySlide(self.read_region(0, 0, self.height, self.width), self.manifest)


def write_slide(slide: ArraySlide, root) -> StoredSlide:
    """Tile ``slide`` into ``root`` and write its manifest (atomic rename)."""
    root = Path(root)
    (root / "tiles").mkdir(parents=True, exist_ok=True)
    m = slide.manifest
    t = m.tile_size
    rows, cols = -(-slide.height // t), -(-slide.width // t)
    tiles = {}
    for r in range(rows):
        for c in range(cols):
            rel = f"tiles/r{r:03d}_c{c:03d}.png"
            block = slide.image[r * t : (r + 1) * t, c * t : (c + 1) * t]
            Image.fromarray(np.ascontiguousarray(block)).save(root / rel, compress_level=1)
            tiles[f"{r},{c}"] = rel
    m.tiles = tiles
    m.check_coverage()
    tmp = root / (MANIFEST_NAME + ".tmp")
    tmp.write_text(m.to_json())
    tmp.replace(root / MANIFEST_NAME)
    return StoredSlide(root)


def open_slide(root) -> StoredSlide:
    return StoredSlide(root)
