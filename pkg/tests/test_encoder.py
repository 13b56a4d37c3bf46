import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cortexlens.core import BrainResponse
from cortexlens.encoder import (
    DEFAULT_LAMBDAS,
    FeatureBankConfig,
    PcaModel,
    RidgeModel,
    TrainedEncoder,
    dataset_features,
    extract_features,
    feature_matrix,
    fit_pca,
    fit_ridge,
    load_encoder,
    mean_absolute_error,
    pearson_per_vertex,
    predict,
    save_encoder,
    train_encoder,
    with_bias,
)
from cortexlens.errors import DimensionMismatch, RankDeficient, ShapeMismatch, SingularSystem, TooFewImages
from cortexlens.synthgen import SynthConfig, generate_dataset


def features_reference(img, grid_sizes):
    """Per-cell loops straight from the feature definitions."""
    img = img.astype(np.float64)
    lum = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    h, w = lum.shape
    out = []
    for g in grid_sizes:
        re = [min((k + 1) * (h // g), h) if k < g - 1 else h for k in range(g)]
        ce = [min((k + 1) * (w // g), w) if k < g - 1 else w for k in range(g)]
        rs = [k * (h // g) for k in range(g)]
        cs = [k * (w // g) for k in range(g)]
        for i in range(g):
            for j in range(g):
                cell = img[rs[i]:re[i], cs[j]:ce[j]]
                L = lum[rs[i]:re[i], cs[j]:ce[j]]
                if L.size == 0:
                    out += [0.0] * 8
                    continue
                feats = [cell[..., c].mean() for c in range(3)] + [L.std()]
                pairs = {"h": [], "v": [], "d1": [], "d2": []}
                for y in range(L.shape[0]):
                    for x in range(L.shape[1]):
                        if x + 1 < L.shape[1]:
                            pairs["h"].append(abs(L[y, x + 1] - L[y, x]))
                        if y + 1 < L.shape[0]:
                            pairs["v"].append(abs(L[y + 1, x] - L[y, x]))
                        if x + 1 < L.shape[1] and y + 1 < L.shape[0]:
                            pairs["d1"].append(abs(L[y + 1, x + 1] - L[y, x]))
                            pairs["d2"].append(abs(L[y + 1, x] - L[y, x + 1]))
                feats += [np.mean(v) if v else 0.0 for v in pairs.values()]
                out += feats
    return np.array(out)


class TestFeatures:
    def test_dimension(self):
        assert FeatureBankConfig().dim == 2728
        assert extract_features(np.zeros((32, 32, 3), np.uint8)).shape == (2728,)

    @pytest.mark.parametrize("sizes", [(), (0, 1), (2, 2), (4, 2)])
    def test_config_validation(self, sizes):
        with pytest.raises(ValueError):
            FeatureBankConfig(sizes)

    def test_uniform_gray(self):
        f = extract_features(np.full((16, 16, 3), 128, np.uint8), FeatureBankConfig((1, 2, 4))).reshape(-1, 8)
        np.testing.assert_allclose(f[:, :3], 128.0)
        np.testing.assert_allclose(f[:, 3:], 0.0, atol=1e-12)

    def test_half_split(self):
        img = np.zeros((8, 8, 3), np.uint8)
        img[:, 4:] = 255
        f = extract_features(img, FeatureBankConfig((1,)))
        assert f[4] > 0 and f[5] == 0.0

    @pytest.mark.parametrize("shape,sizes", [((8, 8), (2,)), ((13, 11), (1, 3)), ((7, 9), (1, 2, 4)), ((3, 5), (4,))])
    def test_matches_reference(self, shape, sizes):
        img = np.random.default_rng(sum(shape)).integers(0, 256, shape + (3,), dtype=np.uint8)
        np.testing.assert_allclose(extract_features(img, FeatureBankConfig(sizes)),
                                   features_reference(img, sizes), rtol=1e-10, atol=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(4, 20), st.integers(4, 20), st.integers(0, 2**31))
    def test_matches_reference_random_shapes(self, h, w, seed):
        img = np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)
        np.testing.assert_allclose(extract_features(img, FeatureBankConfig((1, 2, 3))),
                                   features_reference(img, (1, 2, 3)), rtol=1e-10, atol=1e-9)

    def test_threads_do_not_change_rows(self):
        rng = np.random.default_rng(0)
        imgs = [rng.integers(0, 256, (20, 20, 3), dtype=np.uint8) for _ in range(9)]
        np.testing.assert_array_equal(feature_matrix(imgs, threads=1), feature_matrix(imgs, threads=4))


class TestPca:
    def test_line(self):
        rng = np.random.default_rng(0)
        direction = np.array([1.0, -2.0, 0.5]) / np.linalg.norm([1.0, -2.0, 0.5])
        X = rng.standard_normal((50, 1)) * direction + np.array([3.0, 1.0, -1.0])
        pca = fit_pca(X, 1)
        assert abs(pca.basis[0] @ direction) >= 1 - 1e-8

    def test_against_covariance_eigendecomposition(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((400, 4))
        pca = fit_pca(X, 2)
        evals, evecs = np.linalg.eigh(np.cov(X, rowvar=False))
        order = np.argsort(evals)[::-1]
        np.testing.assert_allclose(pca.explained_variance, evals[order][:2], rtol=1e-10)
        for k in range(2):
            assert abs(pca.basis[k] @ evecs[:, order[k]]) == pytest.approx(1.0, abs=1e-8)
        shares = pca.explained_variance / pca.total_variance
        assert np.all(np.abs(shares - 0.25) < 0.1)

    def test_full_rank_reconstruction(self):
        X = np.random.default_rng(2).standard_normal((10, 4))
        pca = fit_pca(X, 4)
        np.testing.assert_allclose(pca.inverse_transform(pca.transform(X)), X, atol=1e-8)

    def test_orthonormal_and_signed(self):
        pca = fit_pca(np.random.default_rng(3).standard_normal((30, 6)), 5)
        np.testing.assert_allclose(pca.basis @ pca.basis.T, np.eye(5), atol=1e-8)
        idx = np.argmax(np.abs(pca.basis), axis=1)
        assert np.all(pca.basis[np.arange(5), idx] > 0)

    def test_reconstruction_error_non_increasing(self):
        X = np.random.default_rng(4).standard_normal((25, 8))
        errs = []
        for k in range(1, 9):
            p = fit_pca(X, k)
            errs.append(np.sum((p.inverse_transform(p.transform(X)) - X) ** 2))
        assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))

    def test_rank_deficient(self):
        X = np.random.default_rng(5).standard_normal((20, 1)) @ np.ones((1, 5))
        with pytest.raises(RankDeficient):
            fit_pca(X, 2)
        assert fit_pca(X, 3, clip_to_rank=True).k == 1

    def test_bad_k(self):
        with pytest.raises(ValueError):
            fit_pca(np.zeros((3, 2)), 4)
        with pytest.raises(TooFewImages):
            fit_pca(np.zeros((1, 2)), 1)


class TestRidge:
    def test_noiseless_recovery(self):
        rng = np.random.default_rng(0)
        Z = with_bias(rng.standard_normal((30, 4)))
        W0 = rng.standard_normal((5, 3))
        np.testing.assert_allclose(fit_ridge(Z, Z @ W0, 0.0).weights, W0, atol=1e-8)

    def test_shrinkage_limit(self):
        rng = np.random.default_rng(1)
        Z = with_bias(rng.standard_normal((40, 3)))
        Y = rng.standard_normal((40, 2)) + 5
        W = fit_ridge(Z, Y, 1e12).weights
        np.testing.assert_allclose(W[:-1], 0.0, atol=1e-9)
        np.testing.assert_allclose(W[-1], Y.mean(axis=0) - Z[:, :-1].mean(axis=0) @ W[:-1], atol=1e-9)
        np.testing.assert_allclose(W[-1], Y.mean(axis=0), atol=1e-8)

    def test_against_explicit_normal_equations(self):
        rng = np.random.default_rng(2)
        Z = with_bias(rng.standard_normal((5, 1)))
        Y = rng.standard_normal((5, 3))
        lam = 0.7
        A = Z.T @ Z + lam * np.diag([1.0, 0.0])
        np.testing.assert_allclose(fit_ridge(Z, Y, lam).weights, np.linalg.solve(A, Z.T @ Y), atol=1e-10)

    def test_gradient_vanishes(self):
        rng = np.random.default_rng(3)
        Z = with_bias(rng.standard_normal((12, 3)))
        Y = rng.standard_normal((12, 2))
        lam = 2.5
        W = fit_ridge(Z, Y, lam).weights
        penal = np.diag([1.0, 1.0, 1.0, 0.0])

        def objective(W):
            return np.sum((Z @ W - Y) ** 2) + lam * np.sum((penal @ W) ** 2)

        eps = 1e-6
        grad = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            e = np.zeros_like(W)
            e[idx] = eps
            grad[idx] = (objective(W + e) - objective(W - e)) / (2 * eps)
        assert np.max(np.abs(grad)) <= 1e-6

    def test_singular(self):
        Z = with_bias(np.ones((6, 2)))
        with pytest.raises(SingularSystem):
            fit_ridge(Z, np.zeros((6, 1)), 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            fit_ridge(np.ones((3, 2)), np.ones((4, 1)), 1.0)


class TestMetrics:
    def test_pearson_identity_and_sign(self):
        Y = np.random.default_rng(0).standard_normal((6, 4))
        np.testing.assert_allclose(pearson_per_vertex(Y, Y)[0], 1.0)
        np.testing.assert_allclose(pearson_per_vertex(-Y, Y)[0], -1.0)

    def test_pearson_hand_formula(self):
        p, y = np.array([1.0, 2, 3, 4]), np.array([1.0, 2, 3, 5])
        pm, ym = p - p.mean(), y - y.mean()
        expected = (pm @ ym) / np.sqrt((pm @ pm) * (ym @ ym))
        assert pearson_per_vertex(p[:, None], y[:, None])[1] == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.9827076298239907, abs=1e-12)

    def test_pearson_brute_force_5x3(self):
        rng = np.random.default_rng(1)
        P, Y = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        r = pearson_per_vertex(P, Y)[0]
        for j in range(3):
            n = 5
            sp, sy = P[:, j].sum(), Y[:, j].sum()
            num = n * (P[:, j] * Y[:, j]).sum() - sp * sy
            den = np.sqrt((n * (P[:, j] ** 2).sum() - sp**2) * (n * (Y[:, j] ** 2).sum() - sy**2))
            assert r[j] == pytest.approx(num / den, abs=1e-10)

    def test_pearson_excludes_constant_columns(self):
        Y = np.random.default_rng(2).standard_normal((5, 3))
        P = Y.copy()
        P[:, 1] = 4.0
        r, mean, excluded = pearson_per_vertex(P, Y)
        assert np.isnan(r[1]) and excluded == 1 and mean == pytest.approx(1.0)

    def test_pearson_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            pearson_per_vertex(np.zeros((3, 2)), np.zeros((3, 3)))

    def test_mae(self):
        Y = np.random.default_rng(3).standard_normal((3, 3))
        assert mean_absolute_error(Y, Y) == 0.0
        assert mean_absolute_error(Y + 0.5, Y) == pytest.approx(0.5)
        P = np.random.default_rng(4).standard_normal((5, 3))
        Q = np.random.default_rng(5).standard_normal((5, 3))
        brute = sum(abs(P[i, j] - Q[i, j]) for i in range(5) for j in range(3)) / 15
        assert mean_absolute_error(P, Q) == pytest.approx(brute, abs=1e-10)
        with pytest.raises(ShapeMismatch):
            mean_absolute_error(P, Q[:4])


@pytest.fixture(scope="module")
def noiseless():
    cfg = SynthConfig(n_images=300, image_size=(48, 48), n_vertices=60, noise_sigma=0.0,
                      grid_sizes=(1, 2, 4), latent_dim=32, seed=4)
    return generate_dataset(cfg)


class TestTraining:
    def test_too_few_images(self, small_matched):
        with pytest.raises(TooFewImages):
            train_encoder(small_matched[0], small_matched[0].image_ids[:19])

    def test_deterministic(self, small_matched):
        ds = small_matched[0]
        a = train_encoder(ds, ds.image_ids[:100], seed=3)
        b = train_encoder(ds, ds.image_ids[:100], seed=3)
        assert a.ridge_lh.weights.tobytes() == b.ridge_lh.weights.tobytes()
        assert a.pca.basis.tobytes() == b.pca.basis.tobytes()

    def test_seed_changes_shuffle(self, small_matched):
        ds = small_matched[0]
        a = train_encoder(ds, ds.image_ids[:100], seed=1)
        b = train_encoder(ds, ds.image_ids[:100], seed=2)
        assert a.metadata["val_ids"] != b.metadata["val_ids"]
        assert a.metadata["train_ids"] == b.metadata["train_ids"] == ds.image_ids[:100]

    def test_metadata(self, small_matched):
        ds = small_matched[0]
        enc = train_encoder(ds, ds.image_ids[:100])
        assert enc.metadata["lambda"] in DEFAULT_LAMBDAS
        assert enc.metadata["k"] == min(256, 99)
        assert len(enc.metadata["val_ids"]) == 10
        assert enc.n_vertices_lh == ds.n_vertices_lh

    def test_noiseless_interpolation(self, noiseless):
        ds, _ = noiseless
        enc = train_encoder(ds, ds.image_ids, FeatureBankConfig((1, 2, 4)), lambdas=(0.0,))
        X = dataset_features(ds, enc.config, ds.image_ids[:20])
        lh, rh = enc.predict_features(X)
        np.testing.assert_allclose(lh, ds.responses("lh", ds.image_ids[:20]), atol=1e-6)
        np.testing.assert_allclose(rh, ds.responses("rh", ds.image_ids[:20]), atol=1e-6)

    def test_affine_in_latents(self, small_ensemble):
        enc = small_ensemble[0]
        z = np.random.default_rng(0).standard_normal((2, enc.pca.k))
        lh, rh = enc.predict_latents(np.vstack([z, z.mean(axis=0)]))
        np.testing.assert_allclose(lh[2], (lh[0] + lh[1]) / 2, atol=1e-8)
        np.testing.assert_allclose(rh[2], (rh[0] + rh[1]) / 2, atol=1e-8)

    def test_zero_weights_bias_only(self, small_ensemble):
        enc = small_ensemble[0]
        w = np.zeros_like(enc.ridge_lh.weights)
        w[-1] = 1.5
        flat = TrainedEncoder(enc.config, enc.pca, RidgeModel(w, 1.0), RidgeModel(w, 1.0))
        rng = np.random.default_rng(0)
        for _ in range(3):
            resp = predict(flat, rng.integers(0, 256, (64, 64, 3), dtype=np.uint8))
            assert isinstance(resp, BrainResponse)
            np.testing.assert_array_equal(resp.lh, 1.5)

    def test_dimension_mismatch(self, small_ensemble):
        with pytest.raises(DimensionMismatch):
            small_ensemble[0].predict_features(np.zeros((1, 10)))

    def test_different_images_differ(self, small_matched, small_ensemble):
        ds = small_matched[0]
        a = predict(small_ensemble[0], ds.stimulus(ds.image_ids[0]).image)
        b = predict(small_ensemble[0], ds.stimulus(ds.image_ids[1]).image)
        assert not np.allclose(a.lh, b.lh)


class TestSerialization:
    def test_round_trip(self, tmp_path, small_matched, small_ensemble):
        ds = small_matched[0]
        enc = small_ensemble[1]
        save_encoder(enc, tmp_path)
        header = json.loads((tmp_path / "encoder.json").read_text())
        n_floats = sum(int(np.prod(s)) for s in header["shapes"].values())
        assert (tmp_path / "encoder_weights.f32").stat().st_size == 4 * n_floats
        assert header["lambda"] == enc.lam and header["seed"] == enc.metadata["seed"]
        back = load_encoder(tmp_path)
        X = dataset_features(ds, enc.config, ds.image_ids[200:])
        np.testing.assert_allclose(back.predict_features(X)[0], enc.predict_features(X)[0], rtol=1e-4, atol=1e-4)
        save_encoder(back, tmp_path / "again")
        assert (tmp_path / "again" / "encoder_weights.f32").read_bytes() == (
            tmp_path / "encoder_weights.f32").read_bytes()

    def test_corrupt_weights(self, tmp_path, small_ensemble):
        save_encoder(small_ensemble[0], tmp_path)
        p = tmp_path / "encoder_weights.f32"
        p.write_bytes(p.read_bytes() + b"\0\0\0\0")
        with pytest.raises(DimensionMismatch):
            load_encoder(tmp_path)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_encoder(tmp_path)
