"""Render one synthetic slide, sift its patches and build both compact views.

    python demos/slide_basics.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np
from PIL import Image

from gigaslide.slide import (
    SynthConfig,
    build_thumbnail_matrix,
    compression_report,
    crop_bounding_box,
    generate_synthetic_slide,
    sift_patches,
)


def main(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    slide = generate_synthetic_slide(SynthConfig(extent=4096, seed=4, lesion_density=0.04))
    grid = sift_patches(slide, 256)
    cropped, offset = crop_bounding_box(grid)
    print(f"grid {grid.shape}, kept {int(grid.kept.sum())}, crop {cropped.shape} at {offset}")
    print(f"lesions: {len(slide.manifest.lesions)}")

    h, w = cropped.shape
    region = (offset[0] * 256, offset[1] * 256, h * 256, w * 256)
    thumb = build_thumbnail_matrix(slide, 128, [0, 1, 2], region=region)
    print(f"thumbnail matrix {thumb.data.shape}")
    rgb = ((1 - thumb.data[:3].transpose(1, 2, 0)) * 255).round().astype(np.uint8)
    Image.fromarray(rgb).resize((rgb.shape[1] * 8, rgb.shape[0] * 8), Image.NEAREST).save(out / "thumbnail.png")
    Image.fromarray((grid.kept * 255).astype(np.uint8)).resize((256, 256), Image.NEAREST).save(out / "kept.png")

    for levels in (1, 2, 3, 4):
        r = compression_report(256, 128, 128, levels)
        print(f"L={levels}: combined compression {r.combined_ratio:.1f}")
    print(f"images written to {out}")


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out"))
