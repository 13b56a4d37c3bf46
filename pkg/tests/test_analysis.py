import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from cortexlens.analysis import (
    AugmentLogRecord,
    DeltaTensor,
    SELECTIVITY_CONDITIONS,
    altered_pixels_vs_delta,
    augmentation_stats,
    augmentation_stats_from_deltas,
    compute_deltas,
    mean_altered_fraction,
    paired_ttest,
    roi_delta_table,
    selectivity_probe,
    spearman,
    student_t_two_sided_p,
)
from cortexlens.augment import ENHANCEMENTS, AugmentationKind, AugmentationParams, apply_augmentation
from cortexlens.core import RoiAtlas
from cortexlens.encoder import extract_features
from cortexlens.ensemble import EnsemblePredictions, partition_folds, train_ensemble
from cortexlens.errors import DegenerateVariance, LengthMismatch, TooFewImages, TooFewPoints, TooFewSamples

K = AugmentationKind


def t_density(x, df):
    log_c = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(log_c - (df + 1) / 2 * math.log1p(x * x / df))


def quadrature_p(t, df):
    """Two-sided tail mass by direct numerical integration of the t density."""
    inner, _ = integrate.quad(t_density, 0.0, abs(t), args=(df,), epsabs=1e-13, epsrel=1e-13, limit=200)
    return 1.0 - 2.0 * inner


def manual_sds(t):
    """Population SDs written out with explicit Python loops."""
    n_i, n_m, n_v = t.shape
    out = np.zeros((3, n_v))
    for v in range(n_v):
        flat = [t[i, m, v] for i in range(n_i) for m in range(n_m)]
        out[0, v] = np.sqrt(np.mean((np.array(flat) - np.mean(flat)) ** 2))
        out[1, v] = np.mean([np.sqrt(np.mean((t[i, :, v] - t[i, :, v].mean()) ** 2)) for i in range(n_i)])
        out[2, v] = np.mean([np.sqrt(np.mean((t[:, m, v] - t[:, m, v].mean()) ** 2)) for m in range(n_m)])
    return out


def hand_deltas(orig, deltas, n_img):
    """A DeltaTensor from raw arrays; the same arrays are used for both hemispheres."""
    orig = np.asarray(orig, dtype=np.float64)
    ids = tuple(range(n_img))
    return DeltaTensor(EnsemblePredictions(orig, orig.copy(), ids),
                       {K(k): {"lh": np.asarray(v, float), "rh": np.asarray(v, float).copy()} for k, v in deltas.items()},
                       ids)


class TestTTest:
    def test_worked_example(self):
        res = paired_ttest([1.1, 0.9, 1.2, 0.8, 1.0], np.zeros(5))
        assert res.t == pytest.approx(14.142, abs=1e-3)
        assert res.df == 4 and res.n == 5
        assert res.p == pytest.approx(1.45128e-4, rel=1e-4)

    @pytest.mark.parametrize("df", range(1, 31))
    def test_p_matches_quadrature(self, df):
        for t in (0.0, 0.3, 1.0, 2.0, 3.5, 7.0):
            assert student_t_two_sided_p(t, df) == pytest.approx(quadrature_p(t, df), abs=1e-6)

    def test_matches_scipy_reference(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal(12), rng.standard_normal(12)
        ref = stats.ttest_rel(a, b)
        res = paired_ttest(a, b)
        assert res.t == pytest.approx(ref.statistic, rel=1e-12)
        assert res.p == pytest.approx(ref.pvalue, rel=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=3, max_size=20), st.floats(0.1, 100), st.integers(0, 10**6))
    def test_antisymmetry_and_scale(self, xs, c, seed):
        a = np.array(xs)
        b = a + np.random.default_rng(seed).standard_normal(a.size)
        ab, ba = paired_ttest(a, b), paired_ttest(b, a)
        assert ab.t == pytest.approx(-ba.t, rel=1e-9, abs=1e-12)
        assert ab.p == pytest.approx(ba.p, rel=1e-9)
        scaled = paired_ttest(c * a, c * b)
        assert scaled.t == pytest.approx(ab.t, rel=1e-6, abs=1e-9)
        assert 0.0 <= ab.p <= 1.0

    def test_identical_samples(self):
        res = paired_ttest([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert (res.t, res.p) == (0.0, 1.0)

    def test_constant_nonzero_difference(self):
        with pytest.raises(DegenerateVariance):
            paired_ttest([2.0, 3.0, 4.0], [1.0, 2.0, 3.0])

    def test_errors(self):
        with pytest.raises(LengthMismatch):
            paired_ttest([1, 2, 3], [1, 2])
        with pytest.raises(TooFewSamples):
            paired_ttest([1.0], [2.0])

    def test_infinite_t(self):
        assert student_t_two_sided_p(np.inf, 3) == 0.0


class TestRoiDeltaTable:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.orig = rng.standard_normal((2, 6, 4))
        self.d = 0.5 + 0.3 * rng.standard_normal((2, 6, 4))
        self.atlas = RoiAtlas({"a": [0, 1], "b": [1, 2, 3]}, {"a": [3]})
        self.tensor = hand_deltas(self.orig, {"overlay": self.d, "original": np.zeros_like(self.d)}, 6)

    def test_row_count(self):
        table = roi_delta_table(self.tensor, self.atlas)
        # 3 (roi, hemisphere) pairs times 2 kinds
        assert len(table.rows) == 6

    def test_against_scipy(self):
        table = roi_delta_table(self.tensor, self.atlas)
        row = table.row("b", "lh", "overlay")
        idx = [1, 2, 3]
        orig = self.orig[:, :, idx].mean(axis=(0, 2))
        aug = (self.orig + self.d)[:, :, idx].mean(axis=(0, 2))
        ref = stats.ttest_rel(aug, orig)
        assert row.mean_delta == pytest.approx(self.d[:, :, idx].mean(), abs=1e-12)
        assert row.t == pytest.approx(ref.statistic, rel=1e-10)
        assert row.p == pytest.approx(ref.pvalue, rel=1e-8)
        assert row.df == 5 and row.significant == (ref.pvalue < 0.05)

    def test_original_kind_is_null(self):
        row = roi_delta_table(self.tensor, self.atlas).row("a", "rh", "original")
        assert (row.mean_delta, row.t, row.p, row.significant) == (0.0, 0.0, 1.0, False)

    def test_constant_shift_recorded_as_infinite_t(self):
        tensor = hand_deltas(self.orig, {"cover": np.full_like(self.d, -0.25)}, 6)
        row = roi_delta_table(tensor, self.atlas).row("a", "lh", "cover")
        assert row.t == -np.inf and row.p == 0.0 and row.significant

    def test_scaling(self):
        base = roi_delta_table(self.tensor, self.atlas)
        scaled = roi_delta_table(self.tensor.scaled(3.0), self.atlas)
        for r, s in zip(base.rows, scaled.rows):
            assert s.mean_delta == pytest.approx(3.0 * r.mean_delta, abs=1e-12)
            assert s.t == pytest.approx(r.t, rel=1e-9, abs=1e-12)
            assert s.p == pytest.approx(r.p, rel=1e-8, abs=1e-15)

    def test_bonferroni(self):
        table = roi_delta_table(self.tensor, self.atlas, alpha=0.05, bonferroni=True)
        assert table.metadata["threshold"] == pytest.approx(0.05 / 6)
        assert all(r.significant == (r.p < 0.05 / 6) for r in table.rows)

    def test_too_few_images(self):
        tensor = hand_deltas(self.orig[:, :1], {"overlay": self.d[:, :1]}, 1)
        with pytest.raises(TooFewSamples):
            roi_delta_table(tensor, self.atlas)


class TestAugmentationStats:
    def test_brute_force_2x2x1(self):
        orig = np.array([[[1.0], [2.0]], [[3.0], [5.0]]])
        aug = np.array([[[1.5], [2.0]], [[2.0], [6.0]]])
        rows = augmentation_stats(EnsemblePredictions(orig, orig), {"overlay": EnsemblePredictions(aug, aug)})
        assert len(rows) == 2
        r = rows[0]
        assert (r.kind, r.hemisphere) == ("overlay", "lh")
        np.testing.assert_allclose([r.signal_sd_total, r.signal_sd_across_images, r.signal_sd_across_folds],
                                   manual_sds(aug)[:, 0], atol=1e-12)
        # differences are [0.5, 0], [-1, 1]
        assert r.delta_sd_total == pytest.approx(np.std([0.5, 0.0, -1.0, 1.0]), abs=1e-12)
        assert r.delta_sd_across_images == pytest.approx((0.25 + 1.0) / 2, abs=1e-12)
        assert r.delta_sd_across_folds == pytest.approx((0.75 + 0.5) / 2, abs=1e-12)
        assert r.mean_abs_diff == pytest.approx(2.5 / 4)
        assert r.max_abs_diff == 1.0

    def test_identity_rows(self):
        orig = np.random.default_rng(4).standard_normal((3, 4, 5))
        rows = augmentation_stats(EnsemblePredictions(orig, orig), {"original": EnsemblePredictions(orig, orig)})
        assert all(r.mean_abs_diff == 0.0 and r.delta_sd_total == 0.0 for r in rows)


class TestDeltasOnEncoders:
    def test_original_and_alpha_zero_are_zero(self, small_matched, small_ensemble):
        ds = small_matched[0]
        ids = ds.image_ids[200:210]
        out = compute_deltas(small_ensemble, ds, [K.ORIGINAL, K.OVERLAY], AugmentationParams(overlay_alpha=0.0), ids)
        for hemi in ("lh", "rh"):
            np.testing.assert_array_equal(out.delta(K.ORIGINAL, hemi), 0.0)
            np.testing.assert_allclose(out.delta(K.OVERLAY, hemi), 0.0, atol=1e-9)

    def test_linear_oracle(self, small_matched, small_ensemble):
        ds = small_matched[0]
        ids = ds.image_ids[200:206]
        out = compute_deltas(small_ensemble, ds, ENHANCEMENTS, image_ids=ids)
        assert out.original.lh.shape == (5, 6, ds.n_vertices_lh)
        for kind in ENHANCEMENTS:
            for m, sid in enumerate(ids):
                s = ds.stimulus(sid)
                aug = apply_augmentation(s.image, s.masks, kind).image
                for i, enc in enumerate(small_ensemble):
                    dz = (extract_features(aug, enc.config) - extract_features(s.image, enc.config)) @ enc.pca.basis.T
                    expected = dz @ enc.ridge_lh.weights[:-1]
                    np.testing.assert_allclose(out.delta(kind, "lh")[i, m], expected, atol=1e-8)

    def test_skips_images_without_target(self, small_matched, small_ensemble):
        ds = small_matched[0]
        ids = ds.image_ids[200:240]
        out = compute_deltas(small_ensemble, ds, [K.COVER], image_ids=ids, categories=["face"])
        assert set(out.image_ids) == {i for i in ids if ds.stimulus(i).depicts("face")}
        assert set(out.skipped) == set(ids) - set(out.image_ids)
        assert len(out.augment_log) == len(out.image_ids)

    def test_threads_invariant(self, small_matched, small_ensemble):
        ds = small_matched[0]
        ids = ds.image_ids[200:215]
        a = compute_deltas(small_ensemble, ds, ENHANCEMENTS, image_ids=ids)
        b = compute_deltas(small_ensemble, ds, ENHANCEMENTS, image_ids=ids, threads=4)
        for kind in ENHANCEMENTS:
            np.testing.assert_array_equal(a.delta(kind, "rh"), b.delta(kind, "rh"))
        assert a.augment_log == b.augment_log

    def test_stats_from_deltas(self, small_matched, small_ensemble):
        ds = small_matched[0]
        out = compute_deltas(small_ensemble, ds, [K.ORIGINAL, K.CONTOURS], image_ids=ds.image_ids[200:220])
        rows = augmentation_stats_from_deltas(out)
        assert [(r.kind, r.hemisphere) for r in rows] == [("original", "lh"), ("original", "rh"),
                                                            ("contours", "lh"), ("contours", "rh")]
        assert rows[2].mean_abs_diff == pytest.approx(np.abs(out.delta(K.CONTOURS, "lh")).mean())


class TestSpearman:
    def test_perfect(self):
        assert spearman([1, 2, 3, 4], [10, 20, 35, 90]) == pytest.approx(1.0)
        assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)

    def test_ties_brute_force(self):
        x = [1.0, 2.0, 2.0, 5.0, 3.0]
        y = [0.3, 0.1, 0.4, 0.9, 0.9]
        # average ranks by hand
        rx = np.array([1, 2.5, 2.5, 5, 4])
        ry = np.array([2, 1, 3, 4.5, 4.5])
        assert spearman(x, y) == pytest.approx(np.corrcoef(rx, ry)[0, 1], abs=1e-12)

    def test_constant(self):
        assert math.isnan(spearman([1, 1, 1], [1, 2, 3]))

    def test_altered_pixels_vs_delta(self):
        log = [AugmentLogRecord(0, k, 0, f) for k, f in
               [("original", 0.0), ("contours", 0.01), ("bounding_box", 0.02), ("overlay", 0.1), ("grayscale", 0.4)]]
        orig = np.zeros((2, 1, 1))
        aug = {k: EnsemblePredictions(orig + v, orig + v) for k, v in
               [("original", 0.0), ("contours", 0.1), ("bounding_box", 0.3), ("overlay", 0.2), ("grayscale", 0.9)]}
        stats_rows = augmentation_stats(EnsemblePredictions(orig, orig), aug)
        rho = altered_pixels_vs_delta(stats_rows, log)
        assert rho["lh"] == pytest.approx(0.8) and rho["rh"] == pytest.approx(0.8)
        assert mean_altered_fraction(log)["overlay"] == pytest.approx(0.1)
        with pytest.raises(TooFewPoints):
            altered_pixels_vs_delta(stats_rows[:4], log)


@pytest.fixture(scope="module")
def semantic_ensemble(small_semantic):
    ds = small_semantic[0]
    return train_ensemble(ds, partition_folds(ds.image_ids[:300], 3, seed=0))


class TestSelectivity:
    def test_structure(self, small_semantic, semantic_ensemble):
        ds = small_semantic[0]
        probe = ds.image_ids[300:]
        rep = selectivity_probe(semantic_ensemble, ds, "face", ["face-roi", "word-roi"], image_ids=probe)
        assert rep.n_images == sum(ds.stimulus(i).depicts("face") for i in probe)
        assert [(r.roi, r.condition) for r in rep.rows] == [
            (roi, c) for roi in ("face-roi", "word-roi") for c, _ in SELECTIVITY_CONDITIONS]
        orig = rep.row("face-roi", "original").hemisphere("lh")
        assert orig.delta == 0.0 and orig.ttest.p == 1.0
        covered = rep.row("face-roi", "covered")
        assert covered.lh.mean_activation == pytest.approx(orig.mean_activation + covered.lh.delta)

    def test_too_few_images(self, small_semantic, semantic_ensemble):
        ds = small_semantic[0]
        with pytest.raises(TooFewImages):
            selectivity_probe(semantic_ensemble, ds, "face", ["face-roi"], image_ids=ds.image_ids[:5])
