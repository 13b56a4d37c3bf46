"""Predicted response changes under augmentation and their statistics."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.special
import scipy.stats

from .augment import AugmentationKind, AugmentationParams, ENHANCEMENTS, apply_augmentation
from .core import HEMISPHERES, RoiAtlas, StimulusDataset
from .encoder import TrainedEncoder, dataset_features, feature_matrix
from .ensemble import EnsemblePredictions, predict_features_ensemble, vertex_sds
from .errors import (
    DegenerateVariance,
    LengthMismatch,
    ShapeMismatch,
    TooFewImages,
    TooFewPoints,
    TooFewSamples,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# t-test


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float
    n: int


def student_t_two_sided_p(t: float, df: int) -> float:
    """Two-sided tail probability of Student's t via the regularized incomplete beta."""
    if np.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return float(min(max(scipy.special.betainc(df / 2.0, 0.5, x), 0.0), 1.0))


def paired_ttest(a, b) -> TTestResult:
    """Paired two-sided t-test of ``a`` against ``b`` (sample SD of the differences)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise LengthMismatch(f"paired samples differ in length: {a.size} vs {b.size}")
    n = a.size
    if n < 2:
        raise TooFewSamples("paired t-test needs n >= 2")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, n - 1, 1.0, n)
        raise DegenerateVariance("all paired differences are equal and non-zero")
    t = float(mean / (sd / np.sqrt(n)))
    return TTestResult(t, n - 1, student_t_two_sided_p(t, n - 1), n)


# ---------------------------------------------------------------------------
# deltas


@dataclass(frozen=True)
class AugmentLogRecord:
    image_id: int
    kind: str
    altered_pixel_count: int
    altered_fraction: float


@dataclass(frozen=True)
class DeltaTensor:
    """Ensemble predictions for the originals plus, per kind, ``augmented - original``."""

    original: EnsemblePredictions
    deltas: dict  # kind -> {"lh": array, "rh": array}
    image_ids: tuple
    skipped: tuple = ()
    augment_log: tuple = ()

    @property
    def kinds(self) -> list:
        return list(self.deltas)

    def delta(self, kind, hemi: str) -> np.ndarray:
        return self.deltas[AugmentationKind(kind)][hemi]

    def augmented(self, kind) -> EnsemblePredictions:
        d = self.deltas[AugmentationKind(kind)]
        return EnsemblePredictions(self.original.lh + d["lh"], self.original.rh + d["rh"],
                                   self.image_ids, self.original.instances)

    def scaled(self, c: float) -> "DeltaTensor":
        orig = EnsemblePredictions(c * self.original.lh, c * self.original.rh, self.image_ids,
                                   self.original.instances)
        deltas = {k: {h: c * v for h, v in d.items()} for k, d in self.deltas.items()}
        return DeltaTensor(orig, deltas, self.image_ids, self.skipped, self.augment_log)


def _predict_images(encoders: Sequence, images: Sequence, threads: int) -> tuple:
    if all(isinstance(e, TrainedEncoder) for e in encoders) and len({e.config for e in encoders}) == 1:
        X = feature_matrix(images, encoders[0].config, threads)
        return predict_features_ensemble(encoders, X)
    lh, rh = zip(*(e.predict_batch(images, threads) for e in encoders))
    return np.stack(lh), np.stack(rh)


def compute_deltas(encoders: Sequence, dataset: StimulusDataset, kinds: Sequence = ENHANCEMENTS,
                   params: AugmentationParams | None = None, image_ids: Sequence[int] | None = None,
                   categories: Sequence[str] | None = None, threads: int = 1) -> DeltaTensor:
    """Predicted ``augmented - original`` responses for every encoder, image and kind.

    Augmentations target the masks of ``categories`` (all masks when
    ``None``). Images without any target mask are skipped and logged.
    """
    params = params or AugmentationParams()
    kinds = [AugmentationKind.parse(k) if isinstance(k, str) else AugmentationKind(k) for k in kinds]
    ids = list(dataset.image_ids if image_ids is None else image_ids)
    used, skipped = [], []
    for i in ids:
        if dataset.stimulus(i).masks_of(categories):
            used.append(i)
        else:
            skipped.append(i)
    if skipped:
        log.info("skipping %d images without target masks", len(skipped))
    stimuli = [dataset.stimulus(i) for i in used]

    if all(isinstance(e, TrainedEncoder) for e in encoders) and len({e.config for e in encoders}) == 1:
        X = dataset_features(dataset, encoders[0].config, used, threads)
        orig_lh, orig_rh = predict_features_ensemble(encoders, X) if used else (None, None)
    else:
        orig_lh, orig_rh = _predict_images(encoders, [s.image for s in stimuli], threads)
    if not used:
        v_lh, v_rh = dataset.n_vertices_lh, dataset.n_vertices_rh
        orig_lh = np.zeros((len(encoders), 0, v_lh))
        orig_rh = np.zeros((len(encoders), 0, v_rh))
    original = EnsemblePredictions(orig_lh, orig_rh, tuple(used),
                                   tuple(dict(getattr(e, "metadata", {})) for e in encoders))

    def augment_one(s):
        return apply_augmentation(s.image, s.masks_of(categories), kind, params)

    deltas, records = {}, []
    for kind in kinds:
        if kind is AugmentationKind.ORIGINAL or not used:
            deltas[kind] = {"lh": np.zeros_like(orig_lh), "rh": np.zeros_like(orig_rh)}
            records += [AugmentLogRecord(i, kind.value, 0, 0.0) for i in used]
            continue
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(augment_one, stimuli))
        else:
            results = [augment_one(s) for s in stimuli]
        records += [AugmentLogRecord(i, kind.value, r.altered_pixel_count, r.altered_fraction)
                    for i, r in zip(used, results)]
        aug_lh, aug_rh = _predict_images(encoders, [r.image for r in results], threads)
        deltas[kind] = {"lh": aug_lh - orig_lh, "rh": aug_rh - orig_rh}
    return DeltaTensor(original, deltas, tuple(used), tuple(skipped), tuple(records))


# ---------------------------------------------------------------------------
# ROI delta table


@dataclass(frozen=True)
class RoiDeltaRow:
    roi: str
    hemisphere: str
    kind: str
    mean_delta: float
    t: float
    df: int
    p: float
    significant: bool


@dataclass(frozen=True)
class RoiDeltaTable:
    rows: list
    alpha: float
    metadata: dict = field(default_factory=dict)

    def row(self, roi: str, hemisphere: str, kind) -> RoiDeltaRow:
        kind = AugmentationKind(kind).value
        for r in self.rows:
            if (r.roi, r.hemisphere, r.kind) == (roi, hemisphere, kind):
                return r
        raise KeyError((roi, hemisphere, kind))


def _safe_ttest(a, b) -> TTestResult:
    try:
        return paired_ttest(a, b)
    except DegenerateVariance:
        d = float(np.mean(np.asarray(a) - np.asarray(b)))
        return TTestResult(float(np.copysign(np.inf, d)), len(a) - 1, 0.0, len(a))


def roi_delta_table(deltas: DeltaTensor, atlas: RoiAtlas, alpha: float = 0.05,
                    bonferroni: bool = False) -> RoiDeltaTable:
    """Mean delta per (ROI, hemisphere, kind) with a paired t-test.

    The test compares per-image ROI-mean activations, averaged over
    instances, between augmented and original images.
    """
    if len(deltas.image_ids) < 2:
        raise TooFewSamples("ROI delta statistics need at least 2 images")
    names = atlas.names()
    n_tests = sum(1 for hemi in HEMISPHERES for n in names if n in atlas.rois(hemi)) * len(deltas.kinds)
    threshold = alpha / n_tests if bonferroni and n_tests else alpha
    rows = []
    for roi in names:
        for hemi in HEMISPHERES:
            if roi not in atlas.rois(hemi):
                continue
            idx = atlas.indices(roi, hemi)
            orig = deltas.original.hemisphere(hemi)[:, :, idx]
            orig_means = orig.mean(axis=(0, 2))
            for kind in deltas.kinds:
                d = deltas.deltas[kind][hemi][:, :, idx]
                aug_means = (orig + d).mean(axis=(0, 2))
                res = _safe_ttest(aug_means, orig_means)
                rows.append(RoiDeltaRow(roi, hemi, kind.value, float(d.mean()), res.t, res.df, res.p,
                                        bool(res.p < threshold)))
    meta = {"alpha": alpha, "bonferroni": bonferroni, "threshold": threshold,
            "test": "paired t over per-image ROI means, instance-averaged, sample SD (1/(n-1))"}
    return RoiDeltaTable(rows, alpha, meta)


# ---------------------------------------------------------------------------
# signal and delta statistics per augmentation


@dataclass(frozen=True)
class AugmentationStatsRow:
    kind: str
    hemisphere: str
    signal_sd_total: float
    signal_sd_across_images: float
    signal_sd_across_folds: float
    delta_sd_total: float
    delta_sd_across_images: float
    delta_sd_across_folds: float
    mean_abs_diff: float
    max_abs_diff: float


def augmentation_stats(orig_preds: EnsemblePredictions, aug_preds: dict) -> list:
    """Signal and signal-variation SDs plus mean/max absolute differences per kind and hemisphere."""
    rows = []
    for kind, aug in aug_preds.items():
        kind = AugmentationKind(kind)
        for hemi in HEMISPHERES:
            o, a = orig_preds.hemisphere(hemi), aug.hemisphere(hemi)
            if o.shape != a.shape:
                raise ShapeMismatch(f"{kind.value}/{hemi}: {a.shape} vs original {o.shape}")
            d = a - o
            sig = vertex_sds(a).mean(axis=1)
            dsd = vertex_sds(d).mean(axis=1)
            ad = np.abs(d)
            rows.append(AugmentationStatsRow(kind.value, hemi, *map(float, sig), *map(float, dsd),
                                             float(ad.mean()), float(ad.max())))
    return rows


def augmentation_stats_from_deltas(deltas: DeltaTensor) -> list:
    return augmentation_stats(deltas.original, {k: deltas.augmented(k) for k in deltas.kinds})


# ---------------------------------------------------------------------------
# selectivity probe


@dataclass(frozen=True)
class HemisphereEffect:
    mean_activation: float
    delta: float
    ttest: TTestResult


@dataclass(frozen=True)
class SelectivityRow:
    roi: str
    condition: str
    category: str
    lh: HemisphereEffect | None
    rh: HemisphereEffect | None

    def hemisphere(self, hemi: str) -> HemisphereEffect | None:
        return self.lh if hemi == "lh" else self.rh


@dataclass(frozen=True)
class SelectivityReport:
    category: str
    rows: list
    n_images: int

    def row(self, roi: str, condition: str) -> SelectivityRow:
        for r in self.rows:
            if r.roi == roi and r.condition == condition:
                return r
        raise KeyError((roi, condition))


SELECTIVITY_CONDITIONS = (
    ("original", AugmentationKind.ORIGINAL),
    ("highlighted", AugmentationKind.BOUNDING_BOX),
    ("covered", AugmentationKind.COVER),
)
MIN_SELECTIVITY_IMAGES = 10


def selectivity_probe(encoders: Sequence, dataset: StimulusDataset, category: str, rois: Sequence[str],
                      params: AugmentationParams | None = None, image_ids: Sequence[int] | None = None,
                      threads: int = 1) -> SelectivityReport:
    """Original / bounding-box highlighted / covered responses for one category's objects."""
    pool = dataset.image_ids if image_ids is None else list(image_ids)
    ids = [i for i in pool if dataset.stimulus(i).depicts(category)]
    if len(ids) < MIN_SELECTIVITY_IMAGES:
        raise TooFewImages(f"only {len(ids)} images depict {category!r}; need {MIN_SELECTIVITY_IMAGES}")
    deltas = compute_deltas(encoders, dataset, [k for _, k in SELECTIVITY_CONDITIONS], params, ids,
                            categories=[category], threads=threads)
    rows = []
    for roi in rois:
        for condition, kind in SELECTIVITY_CONDITIONS:
            effects = {}
            for hemi in HEMISPHERES:
                if roi not in dataset.atlas.rois(hemi):
                    effects[hemi] = None
                    continue
                idx = dataset.atlas.indices(roi, hemi)
                orig = deltas.original.hemisphere(hemi)[:, :, idx].mean(axis=(0, 2))
                d = deltas.deltas[kind][hemi][:, :, idx].mean(axis=(0, 2))
                cond = orig + d
                effects[hemi] = HemisphereEffect(float(cond.mean()), float(d.mean()), _safe_ttest(cond, orig))
            rows.append(SelectivityRow(roi, condition, category, effects["lh"], effects["rh"]))
    return SelectivityReport(category, rows, len(deltas.image_ids))


# ---------------------------------------------------------------------------
# altered pixels vs predicted change


def mean_altered_fraction(augment_log: Sequence) -> dict:
    acc: dict = {}
    for rec in augment_log:
        kind = rec.kind if hasattr(rec, "kind") else rec["kind"]
        frac = rec.altered_fraction if hasattr(rec, "altered_fraction") else rec["altered_fraction"]
        acc.setdefault(AugmentationKind.parse(str(kind)).value, []).append(float(frac))
    return {k: float(np.mean(v)) for k, v in acc.items()}


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    rx = scipy.stats.rankdata(x, method="average")
    ry = scipy.stats.rankdata(y, method="average")
    rx, ry = rx - rx.mean(), ry - ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    return float((rx * ry).sum() / denom) if denom > 0 else float("nan")


def altered_pixels_vs_delta(stats: Sequence[AugmentationStatsRow], augment_log: Sequence) -> dict:
    """Per hemisphere, Spearman rho between mean altered fraction and mean |delta| across kinds.

    The identity augmentation is left out.
    """
    fractions = mean_altered_fraction(augment_log)
    out = {}
    for hemi in HEMISPHERES:
        pts = [(fractions[r.kind], r.mean_abs_diff) for r in stats
               if r.hemisphere == hemi and r.kind != AugmentationKind.ORIGINAL.value and r.kind in fractions]
        if len(pts) < 3:
            raise TooFewPoints(f"need >= 3 augmentation kinds, got {len(pts)}")
        xs, ys = zip(*pts)
        out[hemi] = spearman(xs, ys)
    return out
