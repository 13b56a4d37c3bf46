"""Mask-driven stimulus augmentations.

Every augmentation is a pure function of (image, masks, params). Pixels that an
augmentation does not target are copied byte-for-byte.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import SegmentMask, as_image
from .errors import DimensionMismatch, EmptyMask


class AugmentationKind(str, enum.Enum):
    ORIGINAL = "original"
    BOUNDING_BOX = "bounding_box"
    CONTOURS = "contours"
    GRAYSCALE = "grayscale"
    INVERSE_OVERLAY = "inverse_overlay"
    OVERLAY = "overlay"
    COVER = "cover"

    @classmethod
    def parse(cls, name: str) -> "AugmentationKind":
        key = name.strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {"bbox": "bounding_box", "boundingbox": "bounding_box",
                   "inverseoverlay": "inverse_overlay", "gray": "grayscale"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown augmentation kind {name!r}") from None


#: The five highlighting augmentations compared against the original.
ENHANCEMENTS = (
    AugmentationKind.BOUNDING_BOX,
    AugmentationKind.CONTOURS,
    AugmentationKind.GRAYSCALE,
    AugmentationKind.INVERSE_OVERLAY,
    AugmentationKind.OVERLAY,
)


@dataclass(frozen=True)
class AugmentationParams:
    stroke_color: tuple = (255, 0, 0)
    box_stroke_width: int = 3
    contour_stroke_width: int = 2
    overlay_color: tuple = (255, 0, 0)
    overlay_alpha: float = 0.5
    cover_color: tuple = (128, 128, 128)
    # "background" grays everything outside the targeted objects; "object" grays the objects
    grayscale_target: str = "background"

    def __post_init__(self):
        if self.box_stroke_width < 1 or self.contour_stroke_width < 1:
            raise ValueError("stroke widths must be >= 1")
        if not 0.0 <= self.overlay_alpha <= 1.0:
            raise ValueError("overlay_alpha must lie in [0, 1]")
        if self.grayscale_target not in ("background", "object"):
            raise ValueError("grayscale_target must be 'background' or 'object'")
        for name in ("stroke_color", "overlay_color", "cover_color"):
            rgb = tuple(int(v) for v in getattr(self, name))
            if len(rgb) != 3 or min(rgb) < 0 or max(rgb) > 255:
                raise ValueError(f"{name} must be an RGB triple in [0, 255]")
            object.__setattr__(self, name, rgb)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationParams":
        params = cls()
        if "stroke_width" in d:
            d = dict(d)
            w = d.pop("stroke_width")
            d.setdefault("box_stroke_width", w)
            d.setdefault("contour_stroke_width", w)
        return replace(params, **d)

    def to_dict(self) -> dict:
        return {
            "stroke_color": list(self.stroke_color),
            "box_stroke_width": self.box_stroke_width,
            "contour_stroke_width": self.contour_stroke_width,
            "overlay_color": list(self.overlay_color),
            "overlay_alpha": self.overlay_alpha,
            "cover_color": list(self.cover_color),
            "grayscale_target": self.grayscale_target,
        }


@dataclass(frozen=True)
class AugmentationResult:
    image: np.ndarray
    altered_pixel_count: int
    altered_fraction: float


def _bits(mask) -> np.ndarray:
    return mask.bits if isinstance(mask, SegmentMask) else np.asarray(mask, dtype=bool)


def compute_bounding_box(mask) -> tuple:
    """Tightest inclusive ``(x_min, y_min, x_max, y_max)`` around the set bits."""
    bits = _bits(mask)
    ys, xs = np.nonzero(bits)
    if xs.size == 0:
        raise EmptyMask("cannot take the bounding box of an empty mask")
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def extract_boundary(mask) -> np.ndarray:
    """Set pixels with an unset 4-neighbour or lying on the image border.

    Returned as a boolean array of the mask's shape.
    """
    bits = _bits(mask)
    padded = np.pad(bits, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return bits & ~interior


def dilate_square(bits: np.ndarray, width: int) -> np.ndarray:
    """Binary dilation with a ``width x width`` square, offsets -(w-1)//2 .. w//2."""
    if width <= 1:
        return bits.copy()
    h, w = bits.shape
    out = np.zeros_like(bits)
    lo, hi = -((width - 1) // 2), width // 2
    for dy in range(lo, hi + 1):
        for dx in range(lo, hi + 1):
            ys_dst = slice(max(dy, 0), h + min(dy, 0))
            ys_src = slice(max(-dy, 0), h + min(-dy, 0))
            xs_dst = slice(max(dx, 0), w + min(dx, 0))
            xs_src = slice(max(-dx, 0), w + min(-dx, 0))
            out[ys_dst, xs_dst] |= bits[ys_src, xs_src]
    return out


def box_outline(shape: tuple, box: tuple, stroke_width: int) -> np.ndarray:
    """Rectangle outline growing inward from the box edge, clipped to ``shape``."""
    h, w = shape
    x0, y0, x1, y1 = box
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    inside = (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
    near_edge = (
        (xs - x0 < stroke_width) | (x1 - xs < stroke_width)
        | (ys - y0 < stroke_width) | (y1 - ys < stroke_width)
    )
    return inside & near_edge


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def luma_gray(pixels: np.ndarray) -> np.ndarray:
    """Integer luma ``round(0.299 R + 0.587 G + 0.114 B)`` replicated on 3 channels."""
    p = pixels.astype(np.int64)
    lum = (299 * p[..., 0] + 587 * p[..., 1] + 114 * p[..., 2] + 500) // 1000
    return np.repeat(lum[..., None], 3, axis=-1).astype(np.uint8)


def blend(pixels: np.ndarray, color: tuple, alpha: float) -> np.ndarray:
    out = (1.0 - alpha) * pixels.astype(np.float64) + alpha * np.asarray(color, dtype=np.float64)
    return np.clip(round_half_away(out), 0, 255).astype(np.uint8)


def target_region(masks: Sequence, shape: tuple) -> np.ndarray:
    union = np.zeros(shape, dtype=bool)
    for m in masks:
        bits = _bits(m)
        if bits.shape != shape:
            raise DimensionMismatch(f"mask shape {bits.shape} does not match image {shape}")
        union |= bits
    return union


def stroke_region(masks: Sequence, kind: AugmentationKind, params: AugmentationParams, shape: tuple) -> np.ndarray:
    """Pixels that BoundingBox / Contours may paint, per the union of all masks."""
    region = np.zeros(shape, dtype=bool)
    for m in masks:
        bits = _bits(m)
        if not bits.any():
            continue
        if kind is AugmentationKind.BOUNDING_BOX:
            region |= box_outline(shape, compute_bounding_box(bits), params.box_stroke_width)
        else:
            region |= dilate_square(extract_boundary(bits), params.contour_stroke_width)
    return region


def apply_augmentation(image, masks: Sequence, kind, params: AugmentationParams | None = None) -> AugmentationResult:
    """Apply one augmentation targeting the union of ``masks``."""
    img = as_image(image)
    kind = AugmentationKind.parse(kind) if isinstance(kind, str) else kind
    params = params or AugmentationParams()
    shape = img.shape[:2]
    union = target_region(masks, shape)
    if kind is AugmentationKind.ORIGINAL:
        return AugmentationResult(img.copy(), 0, 0.0)
    if not union.any():
        raise EmptyMask(f"{kind.value} needs at least one non-empty target mask")

    out = img.copy()
    if kind in (AugmentationKind.BOUNDING_BOX, AugmentationKind.CONTOURS):
        # strokes are painted per mask in annotation order; same colour so order is moot
        out[stroke_region(masks, kind, params, shape)] = params.stroke_color
    elif kind is AugmentationKind.GRAYSCALE:
        region = ~union if params.grayscale_target == "background" else union
        out[region] = luma_gray(img[region])
    elif kind is AugmentationKind.OVERLAY:
        out[union] = blend(img[union], params.overlay_color, params.overlay_alpha)
    elif kind is AugmentationKind.INVERSE_OVERLAY:
        out[~union] = blend(img[~union], params.overlay_color, params.overlay_alpha)
    elif kind is AugmentationKind.COVER:
        out[union] = params.cover_color
    count = int(np.any(out != img, axis=-1).sum())
    return AugmentationResult(out, count, count / (shape[0] * shape[1]))


def altered_pixel_fraction(original, augmented) -> float:
    a, b = as_image(original), as_image(augmented)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.any(a != b, axis=-1).mean())
