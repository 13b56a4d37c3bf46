"""Baseline brain encoder: filter-bank features -> PCA -> ridge readout.

The readout is a single linear map per hemisphere from the PCA latent
(plus a bias) to every vertex, solved in closed form.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import scipy.linalg

from .core import BrainResponse, StimulusDataset, as_image
from .errors import (
    DimensionMismatch,
    IoFailure,
    MissingFile,
    RankDeficient,
    ShapeMismatch,
    SingularSystem,
    TooFewImages,
)

DEFAULT_GRID_SIZES = (1, 2, 4, 8, 16)
DEFAULT_LAMBDAS = (1e-2, 1e-1, 1.0, 10.0, 1e2, 1e3, 1e4)
FEATURES_PER_CELL = 8
FEATURE_NAMES = ("mean_r", "mean_g", "mean_b", "lum_sd", "grad_h", "grad_v", "grad_d1", "grad_d2")
MIN_TRAIN_IMAGES = 20
VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class FeatureBankConfig:
    grid_sizes: tuple = DEFAULT_GRID_SIZES

    def __post_init__(self):
        sizes = tuple(int(g) for g in self.grid_sizes)
        if not sizes or min(sizes) < 1 or any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError("grid sizes must be >= 1 and strictly increasing")
        object.__setattr__(self, "grid_sizes", sizes)

    @property
    def dim(self) -> int:
        return FEATURES_PER_CELL * sum(g * g for g in self.grid_sizes)


# ---------------------------------------------------------------------------
# features


def _cell_edges(n: int, g: int) -> tuple:
    starts = np.arange(g) * (n // g)
    ends = np.append(starts[1:], n)
    return starts, ends


def _integral(a: np.ndarray) -> np.ndarray:
    """Zero-padded running sum over the last two axes of ``(c, h, w)``."""
    s = np.zeros(a.shape[:-2] + (a.shape[-2] + 1, a.shape[-1] + 1))
    np.cumsum(np.cumsum(a, axis=-2), axis=-1, out=s[..., 1:, 1:])
    return s


def _block_sums(s: np.ndarray, rs, re, cs, ce) -> np.ndarray:
    r0, r1 = rs[:, None], re[:, None]
    c0, c1 = cs[None, :], ce[None, :]
    return s[..., r1, c1] - s[..., r0, c1] - s[..., r1, c0] + s[..., r0, c0]


def _cell_sums(a: np.ndarray, rs, re, cs, ce) -> np.ndarray:
    """Sum of ``a[..., r0:r1, c0:c1]`` for every cell."""
    if np.all(rs[1:] > rs[:-1]) and np.all(cs[1:] > cs[:-1]):
        return np.add.reduceat(np.add.reduceat(a, cs, axis=-1), rs, axis=-2)
    # some cells are empty (image smaller than the grid)
    return _block_sums(_integral(a), rs, re, cs, ce)


def extract_features(image, config: FeatureBankConfig | None = None) -> np.ndarray:
    """Per-cell colour, contrast and oriented-gradient features.

    For every grid size ``g`` the image is cut into ``g x g`` cells (remainder
    pixels go to the last row/column of cells). Each cell yields mean R, G, B,
    the population SD of luminance, and the mean absolute horizontal, vertical,
    diagonal and anti-diagonal 2-pixel differences of luminance, counting only
    pixel pairs that lie inside the cell. Cells left empty because the image
    is smaller than the grid contribute zeros.
    """
    config = config or FeatureBankConfig()
    img = as_image(image)
    h, w = img.shape[:2]
    planes = np.empty((4, h, w))
    planes[:3] = np.moveaxis(img, -1, 0)
    # luminance x 1000 is integer valued, which keeps cell sums exact
    lum = planes[3]
    np.dot(np.array([299.0, 587.0, 114.0]), planes[:3].reshape(3, -1), out=lum.reshape(-1))

    # |difference| maps anchored at the top-left pixel of each pair, zero-padded to (h, w)
    grads = np.zeros((4, h, w))
    np.abs(lum[:, 1:] - lum[:, :-1], out=grads[0, :, :-1])
    np.abs(lum[1:, :] - lum[:-1, :], out=grads[1, :-1, :])
    np.abs(lum[1:, 1:] - lum[:-1, :-1], out=grads[2, :-1, :-1])
    np.abs(lum[1:, :-1] - lum[:-1, 1:], out=grads[3, :-1, :-1])
    needs_dy = (0, 1, 1, 1)
    needs_dx = (1, 0, 1, 1)

    out = []
    for g in config.grid_sizes:
        rs, re = _cell_edges(h, g)
        cs, ce = _cell_edges(w, g)
        rows, cols = re - rs, ce - cs
        n = np.outer(rows, cols).astype(np.float64)
        safe_n = np.where(n > 0, n, 1.0)
        feats = np.zeros((FEATURES_PER_CELL, g, g))
        means = _cell_sums(planes, rs, re, cs, ce) / safe_n
        feats[:3] = means[:3]

        # a pair is inside a cell unless its partner pixel starts a new cell
        stacked = np.empty((5, h, w))
        dev = lum - np.repeat(np.repeat(means[3], rows, axis=0), cols, axis=1)
        np.multiply(dev, dev, out=stacked[0])
        stacked[1:] = grads
        for j in range(4):
            if needs_dy[j]:
                stacked[1 + j, re - 1, :] = 0.0
            if needs_dx[j]:
                stacked[1 + j, :, ce - 1] = 0.0
        sums = _cell_sums(stacked, rs, re, cs, ce)
        feats[3] = np.sqrt(np.maximum(sums[0], 0.0) / safe_n) / 1000.0
        for j in range(4):
            count = np.outer(np.maximum(rows - needs_dy[j], 0), np.maximum(cols - needs_dx[j], 0)).astype(np.float64)
            feats[4 + j] = np.where(count > 0, sums[1 + j] / np.where(count > 0, count, 1.0), 0.0) / 1000.0
        out.append(np.moveaxis(feats, 0, -1).reshape(-1))
    return np.concatenate(out)


def feature_matrix(images: Sequence, config: FeatureBankConfig | None = None, threads: int = 1) -> np.ndarray:
    """Stack :func:`extract_features` over ``images``; row order follows input order."""
    config = config or FeatureBankConfig()
    if len(images) == 0:
        return np.zeros((0, config.dim))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda im: extract_features(im, config), images))
    else:
        rows = [extract_features(im, config) for im in images]
    return np.vstack(rows)


def dataset_features(dataset: StimulusDataset, config: FeatureBankConfig | None = None,
                     image_ids: Sequence[int] | None = None, threads: int = 1) -> np.ndarray:
    """Feature rows for ``image_ids``; the full matrix is computed once per dataset."""
    config = config or FeatureBankConfig()
    key = ("features", config.grid_sizes)
    if key not in dataset._cache:
        mat = feature_matrix([s.image for s in dataset.stimuli], config, threads)
        mat.flags.writeable = False
        dataset._cache[key] = mat
    mat = dataset._cache[key]
    if image_ids is None:
        return mat
    return mat[dataset.index_of(image_ids)]


# ---------------------------------------------------------------------------
# PCA


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray  # (k, d), orthonormal rows
    explained_variance: np.ndarray
    total_variance: float

    @property
    def k(self) -> int:
        return self.basis.shape[0]

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.basis.T

    def inverse_transform(self, Z: np.ndarray) -> np.ndarray:
        return Z @ self.basis + self.mean


def fit_pca(X: np.ndarray, k: int | None, clip_to_rank: bool = False) -> PcaModel:
    """Top-``k`` principal directions of ``X``.

    Components are ordered by decreasing variance and signed so that their
    largest-magnitude coordinate is positive. Directions whose variance is
    below ``1e-12`` count as numerically absent: asking for more components
    than remain raises :class:`RankDeficient`, unless ``clip_to_rank`` is set,
    in which case ``k`` is reduced to the numerical rank.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise TooFewImages("PCA needs at least two samples")
    if k is None:
        k = min(n, d)
    if k < 1 or k > min(n, d):
        raise ValueError(f"k={k} outside [1, min(n, d)={min(n, d)}]")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    var = s**2 / (n - 1)
    rank = int(np.sum(var >= VARIANCE_FLOOR))
    if k > rank:
        if not clip_to_rank or rank == 0:
            raise RankDeficient(f"requested {k} components but numerical rank is {rank}")
        k = rank
    basis = vt[:k].copy()
    pivot = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(k), pivot])
    basis *= signs[:, None]
    return PcaModel(mean, basis, var[:k].copy(), float(var.sum()))


# ---------------------------------------------------------------------------
# ridge


@dataclass(frozen=True)
class RidgeModel:
    weights: np.ndarray  # (k + 1, v); last row is the bias
    lam: float


def with_bias(Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    return np.hstack([Z, np.ones((Z.shape[0], 1))])


def _ridge_solve(gram: np.ndarray, cross: np.ndarray, lam: float) -> np.ndarray:
    a = gram.copy()
    idx = np.arange(a.shape[0] - 1)
    a[idx, idx] += lam
    try:
        factor = scipy.linalg.cho_factor(a, lower=False, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"normal equations are not positive definite at lambda={lam}") from exc
    w = scipy.linalg.cho_solve(factor, cross, check_finite=False)
    if not np.all(np.isfinite(w)):
        raise SingularSystem(f"non-finite ridge solution at lambda={lam}")
    return w


def fit_ridge(Z: np.ndarray, Y: np.ndarray, lam: float) -> RidgeModel:
    """Ridge regression with an unpenalized bias.

    ``Z`` already carries the bias column as its last column. Solves
    ``(Z'Z + lam I') W = Z'Y`` by Cholesky, where ``I'`` is the identity with
    a zero at the bias position.
    """
    Z = np.asarray(Z, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Z.shape[0] == 0 or Z.shape[0] != Y.shape[0]:
        raise ShapeMismatch(f"Z has {Z.shape[0]} rows, Y has {Y.shape[0]}")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(Y))):
        raise ValueError("ridge inputs must be finite")
    return RidgeModel(_ridge_solve(Z.T @ Z, Z.T @ Y, float(lam)), float(lam))


# ---------------------------------------------------------------------------
# metrics


def pearson_per_vertex(P: np.ndarray, Y: np.ndarray) -> tuple:
    """Column-wise Pearson r.

    Returns ``(r, mean_r, n_excluded)``; columns where either input is
    constant get ``nan`` in ``r`` and are left out of the mean.
    """
    P = np.asarray(P, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if P.shape != Y.shape:
        raise ShapeMismatch(f"shapes differ: {P.shape} vs {Y.shape}")
    if P.ndim == 1:
        P, Y = P[:, None], Y[:, None]
    if P.shape[0] < 2:
        raise TooFewImages("Pearson correlation needs at least two rows")
    pc = P - P.mean(axis=0)
    yc = Y - Y.mean(axis=0)
    sp = np.sqrt((pc * pc).sum(axis=0))
    sy = np.sqrt((yc * yc).sum(axis=0))
    valid = (sp > 0) & (sy > 0)
    r = np.full(P.shape[1], np.nan)
    r[valid] = (pc[:, valid] * yc[:, valid]).sum(axis=0) / (sp[valid] * sy[valid])
    r[valid] = np.clip(r[valid], -1.0, 1.0)
    mean = float(r[valid].mean()) if valid.any() else float("nan")
    return r, mean, int((~valid).sum())


def mean_absolute_error(P: np.ndarray, Y: np.ndarray) -> float:
    P = np.asarray(P, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if P.shape != Y.shape:
        raise ShapeMismatch(f"shapes differ: {P.shape} vs {Y.shape}")
    return float(np.abs(P - Y).mean())


# ---------------------------------------------------------------------------
# trained encoder


class BrainEncoder(Protocol):
    """Anything that maps a batch of images to (lh, rh) response matrices."""

    def predict_batch(self, images: Sequence, threads: int = 1) -> tuple: ...


@dataclass(frozen=True)
class TrainedEncoder:
    config: FeatureBankConfig
    pca: PcaModel
    ridge_lh: RidgeModel
    ridge_rh: RidgeModel
    metadata: dict = field(default_factory=dict)

    @property
    def lam(self) -> float:
        return self.ridge_lh.lam

    @property
    def n_vertices_lh(self) -> int:
        return self.ridge_lh.weights.shape[1]

    @property
    def n_vertices_rh(self) -> int:
        return self.ridge_rh.weights.shape[1]

    def latents(self, X: np.ndarray) -> np.ndarray:
        return self.pca.transform(X)

    def predict_latents(self, Z: np.ndarray) -> tuple:
        Zb = with_bias(Z)
        return Zb @ self.ridge_lh.weights, Zb @ self.ridge_rh.weights

    def predict_features(self, X: np.ndarray) -> tuple:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.pca.mean.shape[0]:
            raise DimensionMismatch(f"feature width {X.shape[1]} != encoder input {self.pca.mean.shape[0]}")
        return self.predict_latents(self.latents(X))

    def predict_batch(self, images: Sequence, threads: int = 1) -> tuple:
        return self.predict_features(feature_matrix(images, self.config, threads))


def predict(encoder: TrainedEncoder, image) -> BrainResponse:
    lh, rh = encoder.predict_features(extract_features(image, encoder.config))
    return BrainResponse(lh[0], rh[0])


def train_encoder(dataset: StimulusDataset, train_ids: Sequence[int], config: FeatureBankConfig | None = None,
                  seed: int = 0, max_components: int = 256, lambdas: Sequence[float] = DEFAULT_LAMBDAS,
                  val_fraction: float = 0.1, threads: int = 1) -> TrainedEncoder:
    """Fit PCA + ridge on ``train_ids``.

    The ids are put in manifest order and shuffled with ``seed``. PCA is fit
    on all of them; lambda is picked by mean Pearson on the last
    ``val_fraction`` of the shuffle after fitting on the rest; the final
    readout is refit on every training image.
    """
    config = config or FeatureBankConfig()
    ids = sorted(set(int(i) for i in train_ids), key=lambda i: dataset.index_of([i])[0])
    if len(ids) < MIN_TRAIN_IMAGES:
        raise TooFewImages(f"need at least {MIN_TRAIN_IMAGES} training images, got {len(ids)}")
    rng = np.random.default_rng(seed)
    order = [ids[k] for k in rng.permutation(len(ids))]

    X = dataset_features(dataset, config, order, threads)
    Y = np.hstack([dataset.responses("lh", order), dataset.responses("rh", order)]).astype(np.float64)
    n_lh = dataset.n_vertices_lh

    pca = fit_pca(X, min(max_components, *X.shape), clip_to_rank=True)
    Zb = with_bias(pca.transform(X))

    n_val = max(1, int(round(val_fraction * len(order))))
    fit_rows = slice(0, len(order) - n_val)
    val_rows = slice(len(order) - n_val, len(order))
    gram = Zb[fit_rows].T @ Zb[fit_rows]
    cross = Zb[fit_rows].T @ Y[fit_rows]
    scores = {}
    for lam in lambdas:
        try:
            w = _ridge_solve(gram, cross, float(lam))
        except SingularSystem:
            scores[float(lam)] = float("nan")
            continue
        scores[float(lam)] = pearson_per_vertex(Zb[val_rows] @ w, Y[val_rows])[1]
    finite = {lam: s for lam, s in scores.items() if np.isfinite(s)}
    if not finite:
        raise SingularSystem("no lambda produced a usable validation fit")
    best = max(finite, key=lambda lam: (finite[lam], -lam))

    w = _ridge_solve(Zb.T @ Zb, Zb.T @ Y, best)
    metadata = {
        "seed": int(seed),
        "train_ids": ids,
        "val_ids": order[val_rows],
        "lambda": best,
        "val_scores": {repr(k): v for k, v in scores.items()},
        "k": pca.k,
        "n_train": len(ids),
    }
    return TrainedEncoder(config, pca, RidgeModel(w[:, :n_lh], best), RidgeModel(w[:, n_lh:], best), metadata)


# ---------------------------------------------------------------------------
# serialization


def save_encoder(encoder: TrainedEncoder, path) -> None:
    """Write ``encoder.json`` and ``encoder_weights.f32`` into directory ``path``."""
    root = Path(path)
    blocks = [encoder.pca.mean, encoder.pca.basis, encoder.ridge_lh.weights, encoder.ridge_rh.weights]
    header = {
        "version": 1,
        "config": {"grid_sizes": list(encoder.config.grid_sizes)},
        "metadata": encoder.metadata,
        "lambda": encoder.lam,
        "seed": encoder.metadata.get("seed"),
        "explained_variance": [float(v) for v in encoder.pca.explained_variance],
        "total_variance": encoder.pca.total_variance,
        "shapes": {
            "pca_mean": list(encoder.pca.mean.shape),
            "pca_basis": list(encoder.pca.basis.shape),
            "weights_lh": list(encoder.ridge_lh.weights.shape),
            "weights_rh": list(encoder.ridge_rh.weights.shape),
        },
    }
    try:
        root.mkdir(parents=True, exist_ok=True)
        with open(root / "encoder.json", "w", encoding="utf-8") as fh:
            json.dump(header, fh, indent=1)
            fh.write("\n")
        with open(root / "encoder_weights.f32", "wb") as fh:
            for b in blocks:
                fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write encoder to {root}: {exc}") from exc


def load_encoder(path) -> TrainedEncoder:
    root = Path(path)
    for name in ("encoder.json", "encoder_weights.f32"):
        if not (root / name).is_file():
            raise MissingFile(f"missing {root / name}")
    with open(root / "encoder.json", encoding="utf-8") as fh:
        header = json.load(fh)
    raw = np.fromfile(root / "encoder_weights.f32", dtype="<f4").astype(np.float64)
    shapes = header["shapes"]
    parts = []
    offset = 0
    for key in ("pca_mean", "pca_basis", "weights_lh", "weights_rh"):
        size = int(np.prod(shapes[key]))
        parts.append(raw[offset: offset + size].reshape(shapes[key]))
        offset += size
    if offset != raw.size:
        raise DimensionMismatch(f"weights file holds {raw.size} floats, header declares {offset}")
    pca = PcaModel(parts[0], parts[1], np.asarray(header["explained_variance"]), float(header["total_variance"]))
    lam = float(header["lambda"])
    return TrainedEncoder(
        FeatureBankConfig(tuple(header["config"]["grid_sizes"])),
        pca,
        RidgeModel(parts[2], lam),
        RidgeModel(parts[3], lam),
        header["metadata"],
    )
