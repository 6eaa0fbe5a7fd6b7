import itertools
import math

import numpy as np
import pytest
import scipy.sparse as sp

from simexp.core import (
    LinearModel,
    Moments,
    RankDeficientError,
    SparseVec,
    expect_sigmoid_gaussian,
    gram_stats,
    hash_features,
    hash_token,
    normal_equation_residual,
    pca_fit,
    predict_clip,
    projection_buckets,
    projection_matrix,
    ridge_fit,
    signed_hash_project,
    splitmix64,
    splitmix64_array,
    token_slot,
)


class TestHashing:
    def test_splitmix_scalar_matches_vector(self):
        xs = np.array([0, 1, 2, 12345, 2**63 + 7], dtype=np.uint64)
        vec = splitmix64_array(xs)
        for x, v in zip(xs, vec):
            assert splitmix64(int(x)) == int(v)

    def test_splitmix_known_value(self):
        # first output of the reference SplitMix64 generator seeded with 0
        assert splitmix64(0) == 0xE220A8397B1DCDAF

    def test_hash_depends_on_seed_and_length(self):
        assert hash_token("abc", 0) != hash_token("abc", 1)
        assert hash_token("a", 0) != hash_token("a\0", 0)

    def test_identical_multisets_identical_vectors(self):
        a = hash_features(["x", "y", "x", "z"], 16)
        b = hash_features(["z", "x", "y", "x"], 16)
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_array_equal(a.values, b.values)

    def test_repeated_token_normalizes_to_unit(self):
        v = hash_features(["tok"] * 7, 1024)
        assert v.nnz == 1
        assert abs(v.values[0]) == pytest.approx(1.0)
        slot, sign = token_slot("tok", 1024)
        assert v.indices[0] == slot and np.sign(v.values[0]) == sign

    def test_value_is_signed_count_normalized(self):
        toks = ["a"] * 3 + ["b"] * 4
        dim = 2**20
        (ia, sa), (ib, sb) = token_slot("a", dim), token_slot("b", dim)
        assert ia != ib
        v = hash_features(toks, dim)
        expected = {ia: 3 * sa / 5, ib: 4 * sb / 5}
        for i, x in zip(v.indices, v.values):
            assert x == pytest.approx(expected[int(i)])

    def test_disjoint_tokens_collision_by_enumeration(self):
        vocab = [f"w{k}" for k in range(10)]
        dim = 16
        slots = {t: token_slot(t, dim)[0] for t in vocab}
        for a, b in itertools.combinations(vocab, 2):
            va, vb = hash_features([a], dim), hash_features([b], dim)
            overlap = set(va.indices.tolist()) & set(vb.indices.tolist())
            assert bool(overlap) == (slots[a] == slots[b])

    def test_empty_context_raises(self):
        with pytest.raises(ValueError, match="empty context"):
            hash_features([], 16)

    def test_sparsevec_validation(self):
        with pytest.raises(ValueError):
            SparseVec(np.array([2, 1]), np.array([1.0, 1.0]), 4)
        with pytest.raises(ValueError):
            SparseVec(np.array([0]), np.array([0.0]), 4)
        s = SparseVec.from_pairs([3, 1, 3], [1.0, 2.0, -1.0], 4)
        np.testing.assert_array_equal(s.indices, [1])
        np.testing.assert_array_equal(s.to_dense(), [0, 2, 0, 0])


class TestProjection:
    def test_zero_vector(self):
        z = SparseVec(np.array([], dtype=np.int64), np.array([]), 64)
        np.testing.assert_array_equal(signed_hash_project(z, 5, 3), np.zeros(5))

    def test_single_bucket_is_signed_sum(self):
        x = SparseVec(np.array([1, 5, 9]), np.array([0.5, -2.0, 3.0]), 16)
        _, sign = projection_buckets(x.indices, 1, 11)
        out = signed_hash_project(x, 1, 11)
        assert out[0] == pytest.approx(float(np.sum(sign * x.values)))

    def test_three_entry_scalar_recomputation(self):
        x = SparseVec(np.array([2, 40, 77]), np.array([1.0, -0.5, 2.0]), 128)
        out = np.zeros(2)
        mask = (1 << 64) - 1
        for i, v in zip(x.indices, x.values):
            h = splitmix64(int(i) ^ splitmix64(7 & mask))
            out[h % 2] += (-1.0 if h >> 63 else 1.0) * v
        np.testing.assert_allclose(signed_hash_project(x, 2, 7), out, atol=1e-15)

    def test_matrix_equivalent_to_vector_projection(self):
        rng = np.random.default_rng(0)
        x = SparseVec.from_pairs(rng.choice(256, 20, replace=False), rng.normal(size=20), 256)
        P = projection_matrix(8, 5, 256)
        np.testing.assert_allclose(x.to_dense() @ P.toarray(), signed_hash_project(x, 8, 5), atol=1e-12)


class TestRidge:
    def test_one_sample_closed_form(self):
        m = ridge_fit(np.array([[1.0]]), np.array([1.0]), 1.0, fit_intercept=False)
        assert m.weights[0] == pytest.approx(0.5)

    def test_huge_penalty_gives_weighted_mean(self):
        rng = np.random.default_rng(1)
        X, y, w = rng.normal(size=(30, 4)), rng.normal(size=30), rng.uniform(0.1, 2, 30)
        m = ridge_fit(X, y, 1e12, weights=w)
        np.testing.assert_allclose(m.weights, 0.0, atol=1e-9)
        assert m.intercept == pytest.approx(np.average(y, weights=w), abs=1e-9)

    def test_invertible_square_interpolates(self):
        rng = np.random.default_rng(2)
        X, y = rng.normal(size=(6, 6)), rng.normal(size=6)
        m = ridge_fit(X, y, 0.0, fit_intercept=False)
        np.testing.assert_allclose(m.raw(X), y, atol=1e-10)

    def test_matches_lstsq_oracle_with_weights(self):
        rng = np.random.default_rng(3)
        n, d, lam = 50, 5, 2.5
        X, y, w = rng.normal(size=(n, d)), rng.normal(size=n), rng.uniform(0.2, 3, n)
        # augmented least squares with an unpenalized intercept column
        A = np.vstack([np.sqrt(w)[:, None] * np.hstack([X, np.ones((n, 1))]),
                       np.hstack([np.sqrt(lam) * np.eye(d), np.zeros((d, 1))])])
        b = np.concatenate([np.sqrt(w) * y, np.zeros(d)])
        sol = np.linalg.lstsq(A, b, rcond=None)[0]
        m = ridge_fit(X, y, lam, weights=w)
        np.testing.assert_allclose(m.weights, sol[:d], atol=1e-10)
        assert m.intercept == pytest.approx(sol[d], abs=1e-10)
        assert normal_equation_residual(X, y, m, w) < 1e-8

    def test_sparse_design_agrees(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(40, 6)) * (rng.random((40, 6)) < 0.5)
        y = rng.normal(size=40)
        a = ridge_fit(X, y, 0.7)
        b = ridge_fit(sp.csr_matrix(X), y, 0.7)
        np.testing.assert_allclose(a.weights, b.weights, atol=1e-12)

    def test_rank_deficient_raises(self):
        X = np.ones((5, 2))
        with pytest.raises(RankDeficientError, match="rank-deficient"):
            ridge_fit(X, np.arange(5.0), 0.0, fit_intercept=False)

    def test_nan_raises(self):
        with pytest.raises(ValueError):
            ridge_fit(np.array([[np.nan]]), np.array([1.0]), 1.0)

    def test_moments_pool_equals_concatenation(self):
        rng = np.random.default_rng(5)
        X1, y1, X2, y2 = rng.normal(size=(20, 3)), rng.normal(size=20), rng.normal(size=(15, 3)), rng.normal(size=15)
        pooled = (Moments.from_rows(X1, y1) + Moments.from_rows(X2, y2)).solve(0.3)
        direct = ridge_fit(np.vstack([X1, X2]), np.concatenate([y1, y2]), 0.3)
        np.testing.assert_allclose(pooled.weights, direct.weights, atol=1e-12)
        assert pooled.intercept == pytest.approx(direct.intercept, abs=1e-12)

    def test_gram_stats_centered(self):
        rng = np.random.default_rng(6)
        X, y = rng.normal(size=(10, 2)), rng.normal(size=10)
        s = gram_stats(X, y, None, centered=True)
        np.testing.assert_allclose(s.x_mean, X.mean(axis=0))


class TestPredictClip:
    @pytest.mark.parametrize("raw,expected", [(1.2, 1.0), (-0.3, 0.0), (0.42, 0.42)])
    def test_clip(self, raw, expected):
        m = LinearModel(np.array([1.0]), 0.0)
        assert predict_clip(m, np.array([raw])) == pytest.approx(expected)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            predict_clip(LinearModel(np.zeros(3)), np.zeros(2))

    def test_round_trip_dict(self):
        m = LinearModel(np.array([1.0, -2.0]), 0.3, 1.5, "dense")
        m2 = LinearModel.from_dict(m.to_dict())
        np.testing.assert_array_equal(m.weights, m2.weights)
        assert (m2.intercept, m2.penalty, m2.space) == (0.3, 1.5, "dense")


class TestPca:
    def test_orthonormal_data_reproduced_up_to_sign(self):
        rng = np.random.default_rng(7)
        Q, _ = np.linalg.qr(rng.normal(size=(8, 3)))
        coef = rng.normal(size=(100, 3))
        X = coef @ Q.T
        pm = pca_fit(X, 3)
        Z = pm.apply(X)
        recon = Z @ pm.matrix + pm.centering
        np.testing.assert_allclose(recon, X, atol=1e-8)

    def test_rank_one_variance(self):
        rng = np.random.default_rng(8)
        X = np.outer(rng.normal(size=200), rng.normal(size=6))
        pm = pca_fit(X, 1)
        s = pm.singular_values
        assert s[0] ** 2 / np.sum(s**2) >= 0.9999
        with pytest.raises(ValueError, match="insufficient rank"):
            pca_fit(X, 2)

    def test_reconstruction_error_matches_full_svd(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(50, 10))
        d = 4
        pm = pca_fit(X, d)
        Xc = X - X.mean(axis=0)
        err = np.sum((Xc - (Xc @ pm.matrix.T) @ pm.matrix) ** 2)
        s = np.linalg.svd(Xc, compute_uv=False)
        assert err == pytest.approx(np.sum(s[d:] ** 2), rel=1e-10)

    def test_sign_convention_and_standardize(self):
        rng = np.random.default_rng(10)
        X = rng.normal(size=(80, 5)) * np.array([5, 3, 2, 1, 0.5])
        pm = pca_fit(X, 3, standardize=True)
        for row in pm.matrix:
            nz = row[np.abs(row) > 1e-12]
            assert nz[0] > 0
        np.testing.assert_allclose(pm.apply(X).var(axis=0, ddof=1), 1.0, rtol=1e-10)


class TestSigmoidGaussian:
    def test_zero_var(self):
        assert expect_sigmoid_gaussian(0.0, 0.0) == pytest.approx(0.5)

    @pytest.mark.parametrize("var", [0.5, 4.0, 25.0])
    def test_symmetry(self, var):
        assert expect_sigmoid_gaussian(0.0, var) == pytest.approx(0.5, abs=1e-14)
        assert expect_sigmoid_gaussian(1.3, var) + expect_sigmoid_gaussian(-1.3, var) == pytest.approx(1.0)

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(11)
        s = 1.0 / (1.0 + np.exp(-(1.0 + rng.standard_normal(10**7))))
        mc, se = s.mean(), s.std() / math.sqrt(s.size)
        assert abs(expect_sigmoid_gaussian(1.0, 1.0) - mc) < 3 * se

    @pytest.mark.parametrize("var", [0.3, 1.0, 4.0, 7.7, 16.0, 25.0])
    @pytest.mark.parametrize("mean", [-3.0, 0.7, 2.5])
    def test_adaptive_quadrature_oracle(self, mean, var):
        from scipy import integrate, special

        sd = math.sqrt(var)
        ref, err = integrate.quad(
            lambda z: special.expit(mean + sd * z) * math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi),
            -40, 40, epsabs=1e-12, epsrel=1e-12, limit=1000,
        )
        assert err < 1e-11
        assert abs(expect_sigmoid_gaussian(mean, var) - ref) < 1e-10

    def test_chunked_matches_scalar(self):
        """Arrays larger than one evaluation chunk give the same values as scalar calls."""
        means = np.linspace(-4, 4, 50_000).reshape(100, 500)
        out = expect_sigmoid_gaussian(means, 7.7)
        assert out.shape == means.shape
        for idx in [(0, 0), (37, 223), (37, 224), (74, 447), (99, 499)]:
            assert out[idx] == pytest.approx(expect_sigmoid_gaussian(float(means[idx]), 7.7), abs=1e-15)

    def test_vectorized(self):
        out = expect_sigmoid_gaussian(np.array([-1.0, 0.0, 1.0]), 2.0)
        assert out.shape == (3,)
        assert out[1] == pytest.approx(0.5)
