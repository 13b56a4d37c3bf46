"""Fold ensembles and the voxel-wise standard-deviation decomposition.

Each ensemble member is trained on its own disjoint fold (not on the
complement of it), so the members see disjoint data.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import HEMISPHERES, RoiAtlas, StimulusDataset
from .encoder import FeatureBankConfig, TrainedEncoder, dataset_features, feature_matrix, train_encoder
from .errors import ShapeMismatch, TooFewImages, TooFewSamples


@dataclass(frozen=True)
class FoldSpec:
    n_folds: int
    folds: tuple
    seed: int

    @property
    def train_ids(self) -> list:
        return sorted(i for f in self.folds for i in f)


def partition_folds(train_ids: Sequence[int], n_folds: int = 5, seed: int = 0) -> FoldSpec:
    """Shuffle ``train_ids`` with ``seed`` and cut them into ``n_folds`` contiguous chunks."""
    ids = [int(i) for i in train_ids]
    if n_folds < 1:
        raise ValueError("n_folds must be >= 1")
    if len(ids) < n_folds:
        raise TooFewImages(f"{len(ids)} ids cannot fill {n_folds} folds")
    perm = np.random.default_rng(seed).permutation(len(ids))
    chunks = np.array_split(perm, n_folds)
    return FoldSpec(n_folds, tuple(tuple(ids[k] for k in chunk) for chunk in chunks), int(seed))


def train_ensemble(dataset: StimulusDataset, folds: FoldSpec, config: FeatureBankConfig | None = None,
                   base_seed: int = 0, threads: int = 1, **train_kwargs) -> list:
    """One encoder per fold; instance ``i`` uses seed ``base_seed + i``."""
    config = config or FeatureBankConfig()
    dataset_features(dataset, config, threads=threads)  # warm the shared cache once

    def fit(i):
        return train_encoder(dataset, folds.folds[i], config, seed=base_seed + i, **train_kwargs)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fit, range(folds.n_folds)))
    return [fit(i) for i in range(folds.n_folds)]


@dataclass(frozen=True)
class EnsemblePredictions:
    """Predictions of every instance for every image: ``[instance, image, vertex]``."""

    lh: np.ndarray
    rh: np.ndarray
    image_ids: tuple = ()
    instances: tuple = ()

    def __post_init__(self):
        if self.lh.ndim != 3 or self.rh.ndim != 3 or self.lh.shape[:2] != self.rh.shape[:2]:
            raise ShapeMismatch(f"inconsistent ensemble shapes {self.lh.shape} / {self.rh.shape}")

    @property
    def n_instances(self) -> int:
        return self.lh.shape[0]

    @property
    def n_images(self) -> int:
        return self.lh.shape[1]

    def hemisphere(self, hemi: str) -> np.ndarray:
        return self.lh if hemi == "lh" else self.rh


def predict_features_ensemble(encoders: Sequence, features: np.ndarray) -> tuple:
    lh, rh = zip(*(enc.predict_features(features) for enc in encoders))
    return np.stack(lh), np.stack(rh)


def predict_ensemble(encoders: Sequence, dataset: StimulusDataset, image_ids: Sequence[int] | None = None,
                     threads: int = 1) -> EnsemblePredictions:
    """Predict ``image_ids`` (default: every image) with every encoder."""
    ids = list(dataset.image_ids if image_ids is None else image_ids)
    configs = {getattr(e, "config", None) for e in encoders}
    if len(configs) == 1 and isinstance(encoders[0], TrainedEncoder):
        X = dataset_features(dataset, encoders[0].config, ids, threads)
        lh, rh = predict_features_ensemble(encoders, X)
    else:
        images = [dataset.stimulus(i).image for i in ids]
        lh, rh = zip(*(e.predict_batch(images, threads) for e in encoders))
        lh, rh = np.stack(lh), np.stack(rh)
    meta = tuple(dict(getattr(e, "metadata", {})) for e in encoders)
    return EnsemblePredictions(lh, rh, tuple(ids), meta)


# ---------------------------------------------------------------------------
# uncertainty


@dataclass(frozen=True)
class SdTriple:
    sd_total: float
    sd_across_images: float
    sd_across_folds: float


@dataclass(frozen=True)
class UncertaintyReport:
    """Mean voxel-wise SDs per hemisphere (``whole``) and per ROI (``rois``).

    ``per_vertex[hemi]`` keeps the un-averaged ``(3, n_vertices)`` array in
    the order total / across images / across folds.
    """

    whole: dict
    rois: dict = field(default_factory=dict)
    per_vertex: dict = field(default_factory=dict, repr=False)
    metadata: dict = field(default_factory=lambda: {"sd_estimator": "population (1/N)"})

    def rows(self) -> list:
        out = []
        for hemi in HEMISPHERES:
            t = self.whole[hemi]
            out.append((hemi, "all", t.sd_total, t.sd_across_images, t.sd_across_folds))
            for roi, t in self.rois.get(hemi, {}).items():
                out.append((hemi, roi, t.sd_total, t.sd_across_images, t.sd_across_folds))
        return out


def vertex_sds(tensor: np.ndarray) -> np.ndarray:
    """``(3, v)`` population SDs of an ``[instance, image, vertex]`` tensor."""
    t = np.asarray(tensor, dtype=np.float64)
    total = t.reshape(-1, t.shape[2]).std(axis=0)
    across_images = t.std(axis=1).mean(axis=0)
    across_folds = t.std(axis=0).mean(axis=0)
    return np.stack([total, across_images, across_folds])


def uncertainty_decomposition(preds: EnsemblePredictions, atlas: RoiAtlas | None = None) -> UncertaintyReport:
    """Three-way SD summary of an ensemble's predictions.

    * total: SD over all (instance, image) pairs per vertex,
    * across images: SD over images per (instance, vertex), averaged over instances,
    * across folds: SD over instances per (image, vertex), averaged over images,

    each then averaged over vertices (or over an ROI's vertices).
    """
    if preds.n_instances < 2 or preds.n_images < 2:
        raise TooFewSamples("need at least 2 instances and 2 images")
    whole, rois, per_vertex = {}, {}, {}
    for hemi in HEMISPHERES:
        sds = vertex_sds(preds.hemisphere(hemi))
        per_vertex[hemi] = sds
        whole[hemi] = SdTriple(*(float(x) for x in sds.mean(axis=1)))
        if atlas is not None:
            rois[hemi] = {name: SdTriple(*(float(x) for x in sds[:, idx].mean(axis=1)))
                          for name, idx in atlas.rois(hemi).items()}
    return UncertaintyReport(whole, rois, per_vertex)
