"""Region masks: target (user box), source (thresholded object heatmap),
edge (dilation ring) and background (complement of source ∪ target).

All masks are hard 0/1 grids; operations are pure and resolution-agnostic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage


class RegionError(ValueError):
    """Invalid region construction (degenerate box, empty ring, ...)."""


class NoSourceRegionError(RegionError):
    """The object heatmap carries no signal (constant), so no source area exists."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized [0,1] coordinates, origin top-left."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise RegionError(
                f"degenerate or out-of-range box: ({self.x0}, {self.y0}, {self.x1}, {self.y1})"
            )

    @classmethod
    def from_string(cls, text: str) -> "BoundingBox":
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 4:
            raise RegionError(f"expected 'x0,y0,x1,y1', got {text!r}")
        return cls(*(float(p) for p in parts))


@dataclass(frozen=True)
class BinaryMask:
    data: np.ndarray  # uint8 {0,1}, shape (H, W)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise RegionError(f"mask must be 2-D, got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise RegionError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "data", arr.astype(np.uint8))

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def as_bool(self) -> np.ndarray:
        return self.data.astype(bool)


@dataclass(frozen=True)
class RegionMasks:
    """The four masks at one common resolution.

    Invariants: source ∩ target = ∅; edge ∩ (source ∪ target) = ∅;
    background = complement(source ∪ target).
    """

    target: BinaryMask
    source: BinaryMask
    edge: BinaryMask
    background: BinaryMask

    def __post_init__(self):
        res = self.target.resolution
        for name in ("source", "edge", "background"):
            if getattr(self, name).resolution != res:
                raise RegionError(f"mask {name} resolution differs from target")
        t, s, e, b = (m.as_bool() for m in (self.target, self.source, self.edge, self.background))
        if (t & s).any():
            raise RegionError("source and target overlap")
        if (e & s).any() or (e & t).any():
            raise RegionError("edge overlaps source or target")
        if not (b == ~(s | t)).all():
            raise RegionError("background is not the complement of source ∪ target")

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.target.resolution


def bbox_to_mask(box: BoundingBox, resolution: Tuple[int, int]) -> BinaryMask:
    """Rasterize a normalized box: a cell is inside iff its center is in [x0,x1)×[y0,y1).

    A box too small to cover any cell center snaps to the single cell containing
    its own center, so the result is never empty.
    """
    h, w = resolution
    cy = (np.arange(h) + 0.5) / h
    cx = (np.arange(w) + 0.5) / w
    inside = ((cy >= box.y0) & (cy < box.y1))[:, None] & ((cx >= box.x0) & (cx < box.x1))[None, :]
    if not inside.any():
        i = min(int(((box.y0 + box.y1) / 2) * h), h - 1)
        j = min(int(((box.x0 + box.x1) / 2) * w), w - 1)
        inside[i, j] = True
    return BinaryMask(inside.astype(np.uint8))


def threshold_source_mask(heatmap, threshold: float) -> BinaryMask:
    """Select cells whose min-max normalized response is >= threshold.

    `heatmap` is a TokenHeatmap (attention module) or a plain (H, W) array already
    normalized to [0,1]. A constant heatmap carries no localization signal.
    """
    if not (0.0 < threshold < 1.0):
        raise RegionError(f"threshold must be in (0,1), got {threshold}")
    data = np.asarray(heatmap.data if hasattr(heatmap, "data") else heatmap, dtype=np.float64)
    raw = np.asarray(heatmap.raw if hasattr(heatmap, "raw") else data, dtype=np.float64)
    if np.ptp(raw) == 0.0:
        raise NoSourceRegionError("constant heatmap: no source region to threshold")
    return BinaryMask((data >= threshold).astype(np.uint8))


def subtract_target(source_raw: BinaryMask, target: BinaryMask) -> BinaryMask:
    if source_raw.resolution != target.resolution:
        raise RegionError("resolution mismatch between source and target")
    return BinaryMask(source_raw.data & (1 - target.data))


def _check_kernel(kernel: int) -> None:
    if kernel < 3 or kernel % 2 == 0:
        raise RegionError(f"dilation kernel must be odd and >= 3, got {kernel}")


def dilate(mask: BinaryMask, kernel: int) -> BinaryMask:
    """Morphological dilation with a kernel×kernel square element, zero-padded borders."""
    _check_kernel(kernel)
    out = ndimage.binary_dilation(mask.as_bool(), structure=np.ones((kernel, kernel), bool))
    return BinaryMask(out.astype(np.uint8))


def edge_ring(source: BinaryMask, kernel: int) -> BinaryMask:
    """The dilation ring around `source`: dilate(source) minus source itself."""
    ring = dilate(source, kernel).data & (1 - source.data)
    if ring.sum() == 0 and source.count > 0:
        raise RegionError("edge ring is empty (source covers the whole grid)")
    return BinaryMask(ring)


@dataclass(frozen=True)
class RegionParams:
    threshold: float = 0.3
    dilate_kernel: int = 3


def build_region_masks(heatmap, box: BoundingBox, params: RegionParams) -> RegionMasks:
    """Compose the four masks from the object heatmap and the user's target box.

    source = thresholded heatmap minus target; edge = ring(source) minus target
    (so inpainting never copies content out of the area being created);
    background = complement of source ∪ target.
    """
    resolution = np.asarray(heatmap.data if hasattr(heatmap, "data") else heatmap).shape
    target = bbox_to_mask(box, resolution)  # type: ignore[arg-type]
    source_raw = threshold_source_mask(heatmap, params.threshold)
    source = subtract_target(source_raw, target)
    if source.count == 0:
        edge = BinaryMask(np.zeros(resolution, np.uint8))
    else:
        edge = BinaryMask(edge_ring(source, params.dilate_kernel).data & (1 - target.data))
    background = BinaryMask(1 - (source.data | target.data))
    return RegionMasks(target=target, source=source, edge=edge, background=background)


def resample_mask(mask: BinaryMask, resolution: Tuple[int, int]) -> BinaryMask:
    """Nearest-neighbor resampling; integer up-then-downscaling is the identity."""
    h2, w2 = resolution
    if h2 < 1 or w2 < 1:
        raise RegionError(f"bad target resolution {resolution}")
    h1, w1 = mask.resolution
    rows = np.floor((np.arange(h2) + 0.5) * h1 / h2).astype(int)
    cols = np.floor((np.arange(w2) + 0.5) * w1 / w2).astype(int)
    return BinaryMask(mask.data[rows[:, None], cols[None, :]])


def mask_to_png_bytes(mask: BinaryMask) -> bytes:
    """Serialize a mask as an 8-bit PNG (0/255) for artifact bundles."""
    from io import BytesIO

    from PIL import Image

    img = Image.fromarray((mask.data * 255).astype(np.uint8), mode="L")
    buf = BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()
