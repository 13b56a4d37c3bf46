"""Shared domain types and the on-disk dataset format.

A dataset directory looks like::

    manifest.json        version, counts, ordered image ids, categories
    images/<id>.png      8-bit RGB stimuli
    annotations.json     COCO-style polygons, one record per segment
    responses/lh.f32     row-major [n_images x n_vertices_lh] little-endian float32
    responses/rh.f32     same for the right hemisphere
    atlas.json           {"lh": {roi: [indices]}, "rh": {...}}

Images are plain ``numpy.uint8`` arrays of shape ``(height, width, 3)``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import (
    BadAnnotation,
    BadAtlas,
    DimensionMismatch,
    IoFailure,
    MissingFile,
    UnknownRoi,
)

FORMAT_VERSION = 1
HEMISPHERES = ("lh", "rh")


def as_image(pixels) -> np.ndarray:
    """Validate and return an RGB raster as a ``uint8`` array ``(H, W, 3)``."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionMismatch(f"expected an (H, W, 3) RGB raster, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.any((arr < 0) | (arr > 255)) or not np.all(np.equal(np.mod(arr, 1), 0)):
            raise DimensionMismatch("pixel values must be integers in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class CategoryLabel:
    id: int
    name: str

    def __post_init__(self):
        if not self.name:
            raise ValueError("category names must be non-empty")


def rasterize_polygons(polygons: Sequence[Sequence[float]], width: int, height: int) -> np.ndarray:
    """Rasterize COCO-style polygons into a boolean mask.

    Each polygon is a flat ``[x0, y0, x1, y1, ...]`` list in pixel coordinates
    with the origin at the top-left image corner. A pixel is inside a polygon
    when its centre ``(x + 0.5, y + 0.5)`` is inside under the even-odd rule;
    the mask is the union over polygons.
    """
    mask = np.zeros((height, width), dtype=bool)
    for poly in polygons:
        pts = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
        xs, ys = pts[:, 0], pts[:, 1]
        x0 = max(int(np.floor(xs.min())), 0)
        x1 = min(int(np.ceil(xs.max())), width)
        y0 = max(int(np.floor(ys.min())), 0)
        y1 = min(int(np.ceil(ys.max())), height)
        if x1 <= x0 or y1 <= y0:
            continue
        ax, ay = xs, ys
        bx, by = np.roll(xs, -1), np.roll(ys, -1)
        cy = np.arange(y0, y1, dtype=np.float64)[:, None] + 0.5  # (rows, 1)
        crosses = (ay[None, :] > cy) != (by[None, :] > cy)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = ax[None, :] + (cy - ay[None, :]) * (bx - ax)[None, :] / (by - ay)[None, :]
        xint = np.where(crosses, xint, -np.inf)
        cx = np.arange(x0, x1, dtype=np.float64) + 0.5
        count = (cx[None, :, None] < xint[:, None, :]).sum(axis=2)
        mask[y0:y1, x0:x1] |= (count % 2) == 1
    return mask


@dataclass(frozen=True)
class SegmentMask:
    """One annotated segment: its boolean raster, label and source polygons."""

    bits: np.ndarray
    category: CategoryLabel
    polygons: tuple = ()

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    @classmethod
    def from_polygons(cls, polygons, category: CategoryLabel, width: int, height: int) -> "SegmentMask":
        polys = tuple(tuple(float(v) for v in p) for p in polygons)
        for p in polys:
            if len(p) < 6 or len(p) % 2:
                raise BadAnnotation(f"polygon needs >= 3 (x, y) pairs, got {len(p)} values")
            arr = np.asarray(p).reshape(-1, 2)
            if (
                not np.all(np.isfinite(arr))
                or arr[:, 0].min() < 0
                or arr[:, 1].min() < 0
                or arr[:, 0].max() > width
                or arr[:, 1].max() > height
            ):
                raise BadAnnotation(f"polygon for {category.name!r} lies outside the {width}x{height} image")
        bits = rasterize_polygons(polys, width, height)
        if not bits.any():
            raise BadAnnotation(f"annotation for {category.name!r} covers no pixel")
        return cls(_frozen(bits), category, polys)


@dataclass(frozen=True)
class Stimulus:
    image_id: int
    image: np.ndarray
    masks: tuple = ()

    def masks_of(self, categories: Iterable[str] | None = None) -> list:
        if categories is None:
            return list(self.masks)
        wanted = set(categories)
        return [m for m in self.masks if m.category.name in wanted]

    def depicts(self, category: str) -> bool:
        return any(m.category.name == category for m in self.masks)


@dataclass(frozen=True)
class BrainResponse:
    lh: np.ndarray
    rh: np.ndarray

    def hemisphere(self, hemi: str) -> np.ndarray:
        if hemi not in HEMISPHERES:
            raise ValueError(f"hemisphere must be 'lh' or 'rh', got {hemi!r}")
        return self.lh if hemi == "lh" else self.rh


@dataclass(frozen=True)
class RoiAtlas:
    """Named vertex-index sets per hemisphere. ROIs may overlap."""

    lh: dict
    rh: dict

    def __post_init__(self):
        for hemi in HEMISPHERES:
            rois = {name: np.array(sorted(set(int(i) for i in idx)), dtype=np.int64)
                    for name, idx in getattr(self, hemi).items()}
            for name, idx in rois.items():
                if idx.size == 0:
                    raise BadAtlas(f"ROI {name!r} ({hemi}) is empty")
                _frozen(idx)
            object.__setattr__(self, hemi, rois)

    def rois(self, hemi: str) -> dict:
        return self.lh if hemi == "lh" else self.rh

    def names(self) -> list:
        names = list(self.lh)
        names += [n for n in self.rh if n not in self.lh]
        return names

    def indices(self, roi: str, hemi: str) -> np.ndarray:
        try:
            return self.rois(hemi)[roi]
        except KeyError:
            raise UnknownRoi(f"no ROI named {roi!r} in hemisphere {hemi}") from None

    def validate(self, n_lh: int, n_rh: int) -> None:
        for hemi, n in (("lh", n_lh), ("rh", n_rh)):
            for name, idx in self.rois(hemi).items():
                if idx[0] < 0 or idx[-1] >= n:
                    raise BadAtlas(
                        f"ROI {name!r} ({hemi}) references vertex outside [0, {n})"
                    )

    def to_json(self) -> dict:
        return {hemi: {name: [int(i) for i in idx] for name, idx in self.rois(hemi).items()}
                for hemi in HEMISPHERES}


def roi_slice(response: BrainResponse, atlas: RoiAtlas, roi: str, hemisphere: str) -> np.ndarray:
    """Activations of ``response`` at the vertices of one ROI, in index order."""
    return response.hemisphere(hemisphere)[atlas.indices(roi, hemisphere)]


@dataclass(frozen=True)
class StimulusDataset:
    """Single-subject stimulus/response collection.

    ``responses_lh[i]`` is the response to ``stimuli[i]``. Responses are kept as
    float32, the on-disk precision.
    """

    stimuli: tuple
    responses_lh: np.ndarray
    responses_rh: np.ndarray
    atlas: RoiAtlas
    categories: tuple
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        n = len(self.stimuli)
        for hemi in HEMISPHERES:
            resp = getattr(self, f"responses_{hemi}")
            if resp.ndim != 2 or resp.shape[0] != n:
                raise DimensionMismatch(
                    f"{hemi} responses have {resp.shape[0] if resp.ndim else 0} rows for {n} images"
                )
            if not np.all(np.isfinite(resp)):
                raise DimensionMismatch(f"{hemi} responses contain NaN or Inf")
        ids = [s.image_id for s in self.stimuli]
        if len(set(ids)) != len(ids):
            raise ValueError("image ids must be unique")
        cat_ids = [c.id for c in self.categories]
        if len(set(cat_ids)) != len(cat_ids):
            raise ValueError("category ids must be unique")
        self.atlas.validate(self.n_vertices_lh, self.n_vertices_rh)
        self._cache["index"] = {i: k for k, i in enumerate(ids)}

    def __len__(self) -> int:
        return len(self.stimuli)

    @property
    def n_vertices_lh(self) -> int:
        return self.responses_lh.shape[1]

    @property
    def n_vertices_rh(self) -> int:
        return self.responses_rh.shape[1]

    @property
    def image_ids(self) -> list:
        return [s.image_id for s in self.stimuli]

    def index_of(self, image_ids: Iterable[int]) -> np.ndarray:
        lookup = self._cache["index"]
        try:
            return np.array([lookup[int(i)] for i in image_ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"image id {exc.args[0]} not in dataset") from None

    def stimulus(self, image_id: int) -> Stimulus:
        return self.stimuli[self.index_of([image_id])[0]]

    def response(self, image_id: int) -> BrainResponse:
        k = self.index_of([image_id])[0]
        return BrainResponse(self.responses_lh[k], self.responses_rh[k])

    def responses(self, hemi: str, image_ids: Iterable[int] | None = None) -> np.ndarray:
        resp = self.responses_lh if hemi == "lh" else self.responses_rh
        if image_ids is None:
            return resp
        return resp[self.index_of(image_ids)]

    def category(self, name: str) -> CategoryLabel:
        for c in self.categories:
            if c.name == name:
                return c
        raise KeyError(f"unknown category {name!r}")

    def ids_depicting(self, category: str) -> list:
        return [s.image_id for s in self.stimuli if s.depicts(category)]


# ---------------------------------------------------------------------------
# disk format


def _write_bytes(path: Path, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=1) + "\n").encode("utf-8")


def save_dataset(dataset: StimulusDataset, path) -> None:
    """Write ``dataset`` in the directory layout described in the module docstring."""
    root = Path(path)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "responses").mkdir(exist_ok=True)
        manifest = {
            "version": FORMAT_VERSION,
            "n_images": len(dataset),
            "n_vertices_lh": dataset.n_vertices_lh,
            "n_vertices_rh": dataset.n_vertices_rh,
            "image_ids": [int(i) for i in dataset.image_ids],
            "categories": [{"id": int(c.id), "name": c.name} for c in dataset.categories],
        }
        _write_bytes(root / "manifest.json", _dump_json(manifest))
        annotations = []
        for stim in dataset.stimuli:
            Image.fromarray(stim.image, mode="RGB").save(root / "images" / f"{stim.image_id}.png", format="PNG")
            for m in stim.masks:
                annotations.append({
                    "image_id": int(stim.image_id),
                    "category_id": int(m.category.id),
                    "polygons": [list(p) for p in m.polygons],
                })
        _write_bytes(root / "annotations.json", _dump_json(annotations))
        for hemi in HEMISPHERES:
            resp = np.ascontiguousarray(dataset.responses(hemi), dtype="<f4")
            _write_bytes(root / "responses" / f"{hemi}.f32", resp.tobytes())
        _write_bytes(root / "atlas.json", _dump_json(dataset.atlas.to_json()))
    except OSError as exc:
        raise IoFailure(f"cannot write dataset to {root}: {exc}") from exc


def _read_json(path: Path):
    if not path.is_file():
        raise MissingFile(f"missing {path}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _read_matrix(path: Path, rows: int, cols: int) -> np.ndarray:
    if not path.is_file():
        raise MissingFile(f"missing {path}")
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != rows * cols:
        raise DimensionMismatch(
            f"{path.name} holds {raw.size} floats, expected {rows} x {cols}"
        )
    return raw.reshape(rows, cols).astype(np.float32)


def load_dataset(path) -> StimulusDataset:
    """Load and validate a dataset directory."""
    root = Path(path)
    manifest = _read_json(root / "manifest.json")
    ids = [int(i) for i in manifest["image_ids"]]
    if manifest.get("n_images", len(ids)) != len(ids):
        raise DimensionMismatch("manifest n_images disagrees with image_ids")
    categories = tuple(CategoryLabel(int(c["id"]), str(c["name"])) for c in manifest["categories"])
    by_id = {c.id: c for c in categories}

    ann = _read_json(root / "annotations.json")
    per_image: dict = {i: [] for i in ids}
    for rec in ann:
        iid = int(rec["image_id"])
        if iid not in per_image:
            raise BadAnnotation(f"annotation references unknown image {iid}")
        if int(rec["category_id"]) not in by_id:
            raise BadAnnotation(f"annotation references unknown category {rec['category_id']}")
        per_image[iid].append(rec)

    stimuli = []
    for iid in ids:
        png = root / "images" / f"{iid}.png"
        if not png.is_file():
            raise MissingFile(f"missing {png}")
        with Image.open(png) as im:
            img = np.asarray(im.convert("RGB"), dtype=np.uint8)
        h, w = img.shape[:2]
        masks = tuple(
            SegmentMask.from_polygons(rec["polygons"], by_id[int(rec["category_id"])], w, h)
            for rec in per_image[iid]
        )
        stimuli.append(Stimulus(iid, _frozen(img), masks))

    n = len(ids)
    lh = _read_matrix(root / "responses" / "lh.f32", n, int(manifest["n_vertices_lh"]))
    rh = _read_matrix(root / "responses" / "rh.f32", n, int(manifest["n_vertices_rh"]))
    atlas_json = _read_json(root / "atlas.json")
    atlas = RoiAtlas(dict(atlas_json.get("lh", {})), dict(atlas_json.get("rh", {})))
    return StimulusDataset(tuple(stimuli), _frozen(lh), _frozen(rh), atlas, categories)


def subset(dataset: StimulusDataset, image_ids: Sequence[int]) -> StimulusDataset:
    """A new dataset restricted to ``image_ids`` (in the given order)."""
    idx = dataset.index_of(image_ids)
    return StimulusDataset(
        tuple(dataset.stimuli[k] for k in idx),
        dataset.responses_lh[idx],
        dataset.responses_rh[idx],
        dataset.atlas,
        dataset.categories,
    )


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def directory_digests(path) -> dict:
    """sha256 of every file under ``path`` keyed by relative path."""
    root = Path(path)
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in sorted(files):
            p = Path(dirpath) / f
            out[str(p.relative_to(root))] = file_digest(p)
    return dict(sorted(out.items()))
