"""Storage accounting for the two compact slide representations."""

from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class CompressionReport:
    patch_size: int
    channels: int
    k: int
    levels: int
    thumbnail_ratio: float  # K^2 / L
    embedding_ratio: float  # 3 S^2 / C
    combined_ratio: float

    def as_dict(self) -> dict:
        return asdict(self)


def compression_report(patch_size: int = 256, channels: int = 128, k: int = 128, levels: int = 3) -> CompressionReport:
    """Raw-pixel to compact-representation size ratios.

    thumbnail: K^2 / L; embedding: 3 S^2 / C; combined:

        3 S^2 K^2 / (C K^2 + sum_{l<L} 4^l * 3 * S^2)
    """
    s, c, kk, lv = patch_size, channels, k, levels
    if min(s, c, kk, lv) <= 0:
        raise ValueError("all arguments must be positive")
    thumb = kk * kk / lv
    emb = 3 * s * s / c
    denom = c * kk * kk + sum(4**l for l in range(lv)) * 3 * s * s
    combined = 3 * s * s * kk * kk / denom
    return CompressionReport(s, c, kk, lv, thumb, emb, combined)
