"""Synthetic annotated scenes and a ground-truth linear "brain".

Two brain modes are available:

``matched``
    responses are an affine function of the encoder's own feature bank, sent
    through a fixed seeded random projection. A perfect encoder exists.
``semantic``
    responses are an affine function of per-category visible areas, coarse
    colour layout, per-cell contrast and global luminance. The encoder can
    only approximate it, and category-selective ROIs respond positively to
    the area of their category.

Per-vertex weights are rescaled so the noiseless signal has zero mean and
unit variance over the generated image set.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    BrainResponse,
    CategoryLabel,
    RoiAtlas,
    SegmentMask,
    Stimulus,
    StimulusDataset,
    save_dataset,
)
from .encoder import FeatureBankConfig, dataset_features, extract_features, feature_matrix
from .errors import ConfigInvalid, IoFailure, MissingFile

DEFAULT_CATEGORIES = ("cat", "dog", "phone", "tv", "face", "word")
DEFAULT_ROIS = ("V1-like", "color-area", "face-roi", "word-roi", "cat-roi", "dog-roi", "phone-roi", "tv-roi")

# exact RGB triples each category is painted with; the semantic brain only
# "sees" a category where its mask still shows one of these colours
PALETTES = {
    "cat": ((214, 120, 38), (176, 110, 60)),
    "dog": ((120, 78, 40), (196, 170, 130)),
    "phone": ((60, 60, 66), (100, 104, 112)),
    "tv": ((30, 34, 92), (52, 64, 134)),
    "face": ((232, 190, 150), (198, 140, 100)),
    "word": ((240, 240, 228),),
}
EYE_COLOR = (44, 30, 28)
INK_COLOR = (22, 22, 26)
SIGNATURE = {name: set(cols) for name, cols in PALETTES.items()}
SIGNATURE["face"] |= {EYE_COLOR}
SIGNATURE["word"] |= {INK_COLOR}

SEMANTIC_GRID = 4
MIN_MASK_PIXELS = 16


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 2000
    image_size: tuple = (128, 128)  # (height, width)
    categories: tuple = DEFAULT_CATEGORIES
    objects_per_image: tuple = (1, 4)
    n_vertices: int = 1000
    rois: tuple = DEFAULT_ROIS
    noise_sigma: float = 0.5
    mode: str = "matched"
    seed: int = 0
    latent_dim: int = 64
    grid_sizes: tuple = FeatureBankConfig().grid_sizes

    def __post_init__(self):
        for name in ("image_size", "categories", "objects_per_image", "rois", "grid_sizes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n_images < 1:
            raise ConfigInvalid("n_images must be >= 1")
        h, w = self.image_size
        if h < 48 or w < 48:
            raise ConfigInvalid("image_size must be at least 48 x 48")
        lo, hi = self.objects_per_image
        if lo < 1 or hi < lo:
            raise ConfigInvalid("objects_per_image must be a range with 1 <= lo <= hi")
        unknown = [c for c in self.categories if c not in PALETTES]
        if unknown or not self.categories:
            raise ConfigInvalid(f"unsupported categories {unknown}; choose from {sorted(PALETTES)}")
        if self.mode not in ("matched", "semantic"):
            raise ConfigInvalid("mode must be 'matched' or 'semantic'")
        if self.noise_sigma < 0:
            raise ConfigInvalid("noise_sigma must be >= 0")
        if self.n_vertices < 4 * len(self.rois):
            raise ConfigInvalid("n_vertices too small for the requested ROIs")
        if self.latent_dim < 1:
            raise ConfigInvalid("latent_dim must be >= 1")
        for roi in self.rois:
            if roi.endswith("-roi") and roi[:-4] not in self.categories and roi[:-4] in PALETTES:
                raise ConfigInvalid(f"ROI {roi!r} selects a category that is not generated")
        try:
            FeatureBankConfig(self.grid_sizes)
        except ValueError as exc:
            raise ConfigInvalid(str(exc)) from exc

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigInvalid(f"unknown config keys {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from exc

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def category_labels(self) -> tuple:
        return tuple(CategoryLabel(i + 1, name) for i, name in enumerate(self.categories))


@dataclass(frozen=True)
class GroundTruthBrain:
    """Affine map from a generative basis to vertex responses.

    ``response = (((basis - center) / scale) @ projection) @ weights + bias``,
    with the first ``n_lh`` columns belonging to the left hemisphere.
    """

    mode: str
    noise_sigma: float
    n_lh: int
    n_rh: int
    center: np.ndarray
    scale: np.ndarray
    projection: np.ndarray
    weights: np.ndarray
    bias: np.ndarray
    grid_sizes: tuple = FeatureBankConfig().grid_sizes
    categories: tuple = DEFAULT_CATEGORIES
    basis_names: tuple = field(default=(), compare=False)

    def response_matrix(self, basis: np.ndarray) -> np.ndarray:
        z = ((np.atleast_2d(basis) - self.center) / self.scale) @ self.projection
        return z @ self.weights + self.bias

    def split(self, full: np.ndarray) -> tuple:
        return full[:, : self.n_lh], full[:, self.n_lh:]


# ---------------------------------------------------------------------------
# scene drawing


def disk_polygon(cx: float, cy: float, r: float, n: int = 32) -> list:
    t = 2 * np.pi * np.arange(n) / n
    pts = np.stack([cx + r * np.cos(t), cy + r * np.sin(t)], axis=1)
    return [round(float(v), 3) for v in pts.reshape(-1)]


def rect_polygon(x0: int, y0: int, w: int, h: int) -> list:
    return [float(x0), float(y0), float(x0 + w), float(y0), float(x0 + w), float(y0 + h), float(x0), float(y0 + h)]


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    c0 = rng.integers(40, 221, size=3).astype(np.float64)
    c1 = rng.integers(40, 221, size=3).astype(np.float64)
    angle = rng.uniform(0, 2 * np.pi)
    ys, xs = np.mgrid[0:h, 0:w]
    proj = np.cos(angle) * xs / w + np.sin(angle) * ys / h
    t = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)
    img = np.rint(c0 + (c1 - c0) * t[..., None])
    # neutral-gray bands, e.g. roads or walls
    for _ in range(rng.integers(1, 4)):
        level = float(rng.integers(90, 171))
        width = int(rng.integers(8, 25))
        if rng.random() < 0.5:
            y = int(rng.integers(0, h - width))
            img[y: y + width] = level
        else:
            x = int(rng.integers(0, w - width))
            img[:, x: x + width] = level
    # luma-only jitter keeps gray pixels gray
    img += rng.integers(-4, 5, size=(h, w))[..., None]
    return np.clip(img, 0, 255).astype(np.uint8)


def _shape_polygon(category: str, rng: np.random.Generator, h: int, w: int) -> tuple:
    """A random placement of ``category``'s shape, plus its interior decorations."""
    margin = 2
    if category in ("cat", "face"):
        r = float(rng.integers(10, 19)) if category == "cat" else float(rng.integers(11, 19))
        r = min(r, min(h, w) / 2 - margin - 1)
        cx = rng.uniform(r + margin, w - r - margin)
        cy = rng.uniform(r + margin, h - r - margin)
        poly = disk_polygon(cx, cy, r)
        extras = []
        if category == "face":
            for sx in (-1, 1):
                extras.append((disk_polygon(cx + sx * r / 2.5, cy - r / 4, 2.2, n=12), EYE_COLOR))
            extras.append((rect_polygon(int(cx - r / 3), int(cy + r / 3), max(int(2 * r / 3), 3), 2), EYE_COLOR))
        return poly, extras
    if category == "dog":
        bw = bh = int(rng.integers(20, 33))
    elif category == "phone":
        bw, bh = int(rng.integers(10, 17)), int(rng.integers(24, 37))
    elif category == "tv":
        bw, bh = int(rng.integers(30, 45)), int(rng.integers(18, 27))
    else:  # word
        bw, bh = int(rng.integers(30, 49)), int(rng.integers(12, 19))
    bw, bh = min(bw, w - 2 * margin), min(bh, h - 2 * margin)
    x0 = int(rng.integers(margin, w - bw - margin + 1))
    y0 = int(rng.integers(margin, h - bh - margin + 1))
    extras = []
    if category == "word":
        for y in range(y0 + 1, y0 + bh - 1, 4):
            extras.append((rect_polygon(x0 + 2, y, bw - 4, min(2, y0 + bh - 1 - y)), INK_COLOR))
    return rect_polygon(x0, y0, bw, bh), extras


def generate_scene(config: SynthConfig, index: int) -> Stimulus:
    """One seeded scene; the rng depends only on ``(seed, index)``."""
    rng = np.random.default_rng((config.seed, 0, index))
    h, w = config.image_size
    img = _background(rng, h, w)
    labels = {c.name: c for c in config.category_labels()}
    occupied = np.zeros((h, w), dtype=bool)
    masks = []
    lo, hi = config.objects_per_image
    for _ in range(int(rng.integers(lo, hi + 1))):
        category = config.categories[int(rng.integers(len(config.categories)))]
        palette = PALETTES[category]
        color = palette[int(rng.integers(len(palette)))]
        for _attempt in range(30):
            poly, extras = _shape_polygon(category, rng, h, w)
            mask = SegmentMask.from_polygons([poly], labels[category], w, h)
            grown = np.zeros_like(occupied)
            ys, xs = np.nonzero(mask.bits)
            grown[max(ys.min() - 2, 0): ys.max() + 3, max(xs.min() - 2, 0): xs.max() + 3] = True
            if not (grown & occupied).any() and mask.area >= MIN_MASK_PIXELS:
                break
        else:
            continue
        occupied |= mask.bits
        img[mask.bits] = color
        for extra_poly, extra_color in extras:
            bits = SegmentMask.from_polygons([extra_poly], labels[category], w, h).bits & mask.bits
            img[bits] = extra_color
        masks.append(mask)
    img.flags.writeable = False
    return Stimulus(index, img, tuple(masks))


# ---------------------------------------------------------------------------
# generative bases


def semantic_basis(stimulus: Stimulus, categories=DEFAULT_CATEGORIES) -> np.ndarray:
    """Visible category areas, 4x4 mean colours, 4x4 contrast, global luminance."""
    img = stimulus.image
    h, w = img.shape[:2]
    areas = np.zeros(len(categories))
    packed = (img[..., 0].astype(np.int64) << 16) | (img[..., 1].astype(np.int64) << 8) | img[..., 2]
    for k, name in enumerate(categories):
        sig = np.array([(r << 16) | (g << 8) | b for r, g, b in SIGNATURE[name]])
        for m in stimulus.masks:
            if m.category.name == name:
                areas[k] += np.isin(packed[m.bits], sig).sum()
    areas /= h * w
    coarse = extract_features(img, FeatureBankConfig((SEMANTIC_GRID,))).reshape(SEMANTIC_GRID**2, -1)
    colors = coarse[:, :3].reshape(-1)
    contrast = coarse[:, 3]
    luminance = (0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]).mean()
    return np.concatenate([areas, colors, contrast, [luminance]])


def semantic_basis_names(categories=DEFAULT_CATEGORIES) -> tuple:
    names = [f"area:{c}" for c in categories]
    cells = SEMANTIC_GRID**2
    names += [f"color:{k}:{ch}" for k in range(cells) for ch in "rgb"]
    names += [f"contrast:{k}" for k in range(cells)]
    names.append("luminance")
    return tuple(names)


def basis_matrix(brain_mode: str, stimuli, grid_sizes, categories, threads: int = 1) -> np.ndarray:
    if brain_mode == "matched":
        return feature_matrix([s.image for s in stimuli], FeatureBankConfig(grid_sizes), threads)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda s: semantic_basis(s, categories), stimuli))
    else:
        rows = [semantic_basis(s, categories) for s in stimuli]
    return np.vstack(rows)


def roi_layout(config: SynthConfig) -> RoiAtlas:
    """Contiguous vertex blocks per ROI; face-roi and word-roi share a few vertices."""
    n = config.n_vertices
    size = max(n // (len(config.rois) + 4), 4)
    overlap = max(size // 10, 1)

    def layout(order):
        rois, start, prev = {}, 0, None
        for name in order:
            if {prev, name} == {"face-roi", "word-roi"}:
                start -= overlap
            rois[name] = list(range(start, min(start + size, n)))
            start += size
            prev = name
        return rois

    order = list(config.rois)
    return RoiAtlas(layout(order), layout(order[::-1]))


def _vertex_weights(config: SynthConfig, atlas: RoiAtlas, hemi: str, n_basis: int,
                    rng: np.random.Generator) -> np.ndarray:
    n = config.n_vertices
    if config.mode == "matched":
        return rng.standard_normal((n_basis, n))
    ncat = len(config.categories)
    cells = SEMANTIC_GRID**2
    color = slice(ncat, ncat + 3 * cells)
    contrast = slice(ncat + 3 * cells, ncat + 4 * cells)
    w = 0.3 * rng.standard_normal((n_basis, n))
    roi_of = {}
    for name, idx in atlas.rois(hemi).items():
        for v in idx:
            roi_of.setdefault(int(v), []).append(name)
    for v in range(n):
        names = roi_of.get(v, [])
        if not names:
            continue
        w[:, v] *= 0.3
        for name in names:
            if name == "V1-like":
                w[contrast, v] = 0.6 + 0.4 * np.abs(rng.standard_normal(cells))
            elif name == "color-area":
                w[color, v] = rng.standard_normal(3 * cells)
            elif name.endswith("-roi") and name[:-4] in config.categories:
                k = config.categories.index(name[:-4])
                w[k, v] = 2.0 + np.abs(rng.standard_normal())
    return w


def build_brain(config: SynthConfig, stimuli, atlas: RoiAtlas, threads: int = 1) -> tuple:
    """Fit the brain's normalization on ``stimuli``; returns (brain, basis matrix)."""
    rng = np.random.default_rng((config.seed, 1))
    basis = basis_matrix(config.mode, stimuli, config.grid_sizes, config.categories, threads)
    center = basis.mean(axis=0)
    if config.mode == "matched":
        # seeded rotation of the whitened top principal subspace of the feature bank
        d = basis.shape[1]
        scale = np.ones(d)
        _, sv, vt = np.linalg.svd(basis - center, full_matrices=False)
        sd = sv / np.sqrt(len(stimuli))
        keep = min(config.latent_dim, int(np.sum(sd > 1e-6)))
        if keep < 1:
            # a single image (or identical images): constant zero signal
            projection = np.zeros((d, 1))
        else:
            rotation, _ = np.linalg.qr(rng.standard_normal((keep, keep)))
            projection = (vt[:keep].T / sd[:keep]) @ rotation
        names = ()
    else:
        sd = basis.std(axis=0)
        scale = np.where(sd > 1e-9, sd, 1.0)
        projection = np.eye(basis.shape[1])
        names = semantic_basis_names(config.categories)
    n_basis = projection.shape[1]
    weights = np.hstack([_vertex_weights(config, atlas, hemi, n_basis, rng) for hemi in ("lh", "rh")])
    z = ((basis - center) / scale) @ projection
    raw = z @ weights
    sd = raw.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    weights = weights / sd
    bias = -(raw.mean(axis=0) / sd)
    brain = GroundTruthBrain(
        config.mode, float(config.noise_sigma), config.n_vertices, config.n_vertices,
        center, scale, projection, weights, bias, tuple(config.grid_sizes), tuple(config.categories), names,
    )
    return brain, basis


def generate_dataset(config: SynthConfig | None = None, threads: int = 1) -> tuple:
    """Generate ``(StimulusDataset, GroundTruthBrain)`` from ``config``."""
    config = config or SynthConfig()
    indices = range(config.n_images)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            stimuli = list(pool.map(lambda i: generate_scene(config, i), indices))
    else:
        stimuli = [generate_scene(config, i) for i in indices]
    atlas = roi_layout(config)
    brain, basis = build_brain(config, stimuli, atlas, threads)
    signal = brain.response_matrix(basis)
    noise_rng = np.random.default_rng((config.seed, 2))
    noisy = signal + config.noise_sigma * noise_rng.standard_normal(signal.shape)
    noisy = noisy.astype(np.float32)
    lh, rh = brain.split(noisy)
    dataset = StimulusDataset(tuple(stimuli), np.ascontiguousarray(lh), np.ascontiguousarray(rh),
                              atlas, config.category_labels())
    if config.mode == "matched":
        basis.flags.writeable = False
        dataset._cache[("features", tuple(config.grid_sizes))] = basis
    return dataset, brain


def ground_truth_response(brain: GroundTruthBrain, stimulus: Stimulus) -> BrainResponse:
    basis = basis_matrix(brain.mode, [stimulus], brain.grid_sizes, brain.categories)
    lh, rh = brain.split(brain.response_matrix(basis))
    return BrainResponse(lh[0], rh[0])


def ground_truth_matrix(brain: GroundTruthBrain, stimuli, threads: int = 1) -> tuple:
    """Noiseless (lh, rh) response matrices for a list of stimuli."""
    basis = basis_matrix(brain.mode, stimuli, brain.grid_sizes, brain.categories, threads)
    return brain.split(brain.response_matrix(basis))


def noise_ceiling(brain: GroundTruthBrain, dataset: StimulusDataset, threads: int = 1) -> dict:
    """Per-vertex ``sqrt(var_signal / (var_signal + sigma^2))`` over ``dataset``.

    Returns ``{"lh": array, "rh": array, "mean": float}``; vertices whose
    noiseless signal is constant get ceiling 0 (``nan`` when sigma is 0).
    """
    if brain.mode == "matched":
        basis = dataset_features(dataset, FeatureBankConfig(brain.grid_sizes), threads=threads)
        lh, rh = brain.split(brain.response_matrix(basis))
    else:
        lh, rh = ground_truth_matrix(brain, dataset.stimuli, threads)
    out = {}
    for hemi, sig in (("lh", lh), ("rh", rh)):
        v = sig.var(axis=0)
        denom = v + brain.noise_sigma**2
        with np.errstate(invalid="ignore", divide="ignore"):
            out[hemi] = np.sqrt(np.where(denom > 0, v / denom, np.nan))
    both = np.concatenate([out["lh"], out["rh"]])
    out["mean"] = float(np.nanmean(both))
    return out


# ---------------------------------------------------------------------------
# persistence


def save_brain(brain: GroundTruthBrain, path) -> None:
    """Write ``ground_truth.json`` and ``gt_weights.f32`` (float32, little endian)."""
    root = Path(path)
    blocks = {"center": brain.center, "scale": brain.scale, "projection": brain.projection,
              "weights": brain.weights, "bias": brain.bias}
    header = {
        "version": 1,
        "mode": brain.mode,
        "noise_sigma": brain.noise_sigma,
        "n_vertices_lh": brain.n_lh,
        "n_vertices_rh": brain.n_rh,
        "grid_sizes": list(brain.grid_sizes),
        "categories": list(brain.categories),
        "basis_names": list(brain.basis_names),
        "shapes": {k: list(v.shape) for k, v in blocks.items()},
    }
    try:
        root.mkdir(parents=True, exist_ok=True)
        with open(root / "ground_truth.json", "w", encoding="utf-8") as fh:
            json.dump(header, fh, indent=1)
            fh.write("\n")
        with open(root / "gt_weights.f32", "wb") as fh:
            for b in blocks.values():
                fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write ground truth to {root}: {exc}") from exc


def load_brain(path) -> GroundTruthBrain:
    root = Path(path)
    if not (root / "ground_truth.json").is_file():
        raise MissingFile(f"missing {root / 'ground_truth.json'}")
    with open(root / "ground_truth.json", encoding="utf-8") as fh:
        header = json.load(fh)
    raw = np.fromfile(root / "gt_weights.f32", dtype="<f4").astype(np.float64)
    parts, offset = {}, 0
    for key, shape in header["shapes"].items():
        size = int(np.prod(shape))
        parts[key] = raw[offset: offset + size].reshape(shape)
        offset += size
    return GroundTruthBrain(
        header["mode"], float(header["noise_sigma"]), int(header["n_vertices_lh"]), int(header["n_vertices_rh"]),
        parts["center"], parts["scale"], parts["projection"], parts["weights"], parts["bias"],
        tuple(header["grid_sizes"]), tuple(header["categories"]), tuple(header.get("basis_names", ())),
    )


def write_synthetic(config: SynthConfig, path, threads: int = 1) -> tuple:
    dataset, brain = generate_dataset(config, threads)
    save_dataset(dataset, path)
    save_brain(brain, path)
    return dataset, brain
