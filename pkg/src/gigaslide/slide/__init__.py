"""Slide storage, synthetic slides, patch sifting and thumbnails."""

from .compression import CompressionReport, compression_report
from .sift import (
    KEPT,
    OUT_OF_BBOX,
    SIFTED,
    EmptySlideError,
    PatchGrid,
    auto_threshold,
    crop_bounding_box,
    mark_outside,
    quantize_gray,
    rle_token_count,
    sift_patches,
)
from .store import ArraySlide, Lesion, SlideManifest, SlideReadError, StoredSlide, open_slide, write_slide
from .synth import SynthConfig, generate_synthetic_slide
from .thumbnail import ThumbnailMatrix, aligned_extent, build_thumbnail_matrix, pad_pair

__all__ = [
    "CompressionReport",
    "compression_report",
    "KEPT",
    "OUT_OF_BBOX",
    "SIFTED",
    "EmptySlideError",
    "PatchGrid",
    "auto_threshold",
    "crop_bounding_box",
    "mark_outside",
    "quantize_gray",
    "rle_token_count",
    "sift_patches",
    "ArraySlide",
    "Lesion",
    "SlideManifest",
    "SlideReadError",
    "StoredSlide",
    "open_slide",
    "write_slide",
    "SynthConfig",
    "generate_synthetic_slide",
    "ThumbnailMatrix",
    "aligned_extent",
    "build_thumbnail_matrix",
    "pad_pair",
]
