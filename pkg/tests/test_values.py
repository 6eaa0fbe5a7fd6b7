import numpy as np
import pytest

from simexp.core import LinearModel
from simexp.estimators import RewardModel, Rows, fit_exp_only
from simexp.values import (
    ValueEstimate,
    cross_fit_partition,
    dm_from_predictions,
    dm_values,
    dr_values,
    ht_residual_term,
)


def constant(c, dim):
    return RewardModel("EXP_ONLY", LinearModel(np.zeros(dim), c))


class TestCrossFitPartition:
    def test_even(self):
        labels = cross_fit_partition(10, 5, 0)
        np.testing.assert_array_equal(np.bincount(labels), [2] * 5)

    def test_uneven_order(self):
        for seed in range(5):
            np.testing.assert_array_equal(np.bincount(cross_fit_partition(7, 3, seed)), [3, 2, 2])

    def test_deterministic(self):
        np.testing.assert_array_equal(cross_fit_partition(50, 5, 3), cross_fit_partition(50, 5, 3))
        assert not np.array_equal(cross_fit_partition(50, 5, 3), cross_fit_partition(50, 5, 4))

    def test_too_many_folds(self):
        with pytest.raises(ValueError):
            cross_fit_partition(3, 4, 0)


class TestDm:
    def test_constant_model(self):
        X = np.random.default_rng(0).normal(size=(4 * 3 * 5, 6))
        est = dm_values(constant(0.37, 6), X, 4, 3, 5)
        np.testing.assert_allclose(est.mu_dm, 0.37)
        assert est.q_dm.shape == (4, 3)

    def test_single_draw_is_prediction(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(6, 2)) * 0.1
        m = RewardModel("EXP_ONLY", LinearModel(np.array([0.5, -0.2]), 0.5))
        est = dm_values(m, X, 3, 2, 1)
        np.testing.assert_allclose(est.q_dm.ravel(), m.predict(X), atol=1e-15)

    def test_brute_force_average(self):
        rng = np.random.default_rng(2)
        n_ctx, n_agents, draws = 3, 2, 4
        pred = rng.random(n_ctx * n_agents * draws)
        est = dm_from_predictions(pred, n_ctx, n_agents, draws)
        for a in range(n_agents):
            total = 0.0
            for x in range(n_ctx):
                s = 0.0
                for b in range(draws):
                    s += pred[(x * n_agents + a) * draws + b]
                total += s / draws
            assert est.mu_dm[a] == pytest.approx(total / n_ctx, abs=1e-12)

    def test_rows_input_matches_array(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(12, 3))
        m = RewardModel("EXP_ONLY", LinearModel(np.array([0.1, 0.2, 0.0]), 0.5))
        a = dm_values(m, X, 2, 3, 2)
        b = dm_values(m, Rows(X, np.zeros(12), np.zeros(12)), 2, 3, 2)
        np.testing.assert_array_equal(a.q_dm, b.q_dm)

    def test_range_check(self):
        with pytest.raises(ValueError):
            ValueEstimate(np.array([[1.5]]), np.array([1.5]))


class TestDr:
    def _toy(self, n, seed, n_agents=3):
        rng = np.random.default_rng(seed)
        agents = rng.integers(0, n_agents, n)
        X = np.eye(n_agents)[agents]
        p = np.linspace(0.2, 0.8, n_agents)
        y = (rng.random(n) < p[agents]).astype(float)
        return Rows(X, y, agents), p

    def test_oracle_zero_residuals(self):
        rows, _ = self._toy(40, 0)
        dm = ValueEstimate(np.full((2, 3), 0.5), np.full(3, 0.5))

        class Oracle:
            def predict(self, X):
                return rows.y

        out = dr_values(Oracle(), None, rows, dm)
        np.testing.assert_array_equal(out.mu_dr, dm.mu_dm)

    def test_single_agent_mean_residual(self):
        rng = np.random.default_rng(4)
        rows = Rows(rng.normal(size=(30, 2)), rng.random(30), np.zeros(30))
        model = constant(0.4, 2)
        dm = ValueEstimate(np.full((5, 1), 0.4), np.array([0.4]))
        out = dr_values(model, None, rows, dm)
        assert out.mu_dr[0] == pytest.approx(0.4 + np.mean(rows.y - 0.4), abs=1e-14)

    def test_ht_identity(self):
        rng = np.random.default_rng(5)
        eps, agents = rng.normal(size=50), rng.integers(0, 4, 50)
        term = ht_residual_term(eps, agents, 4)
        for a in range(4):
            assert term[a] == pytest.approx(sum(4 * e for e, b in zip(eps, agents) if b == a) / 50, abs=1e-12)

    def test_absent_agent_no_correction(self):
        rows = Rows(np.zeros((4, 1)), np.ones(4), np.array([0, 0, 1, 1]))
        dm = ValueEstimate(np.full((1, 3), 0.5), np.full(3, 0.5))
        out = dr_values(constant(0.5, 1), None, rows, dm)
        assert out.mu_dr[2] == 0.5
        assert out.mu_dr[0] == pytest.approx(0.5 + 3 * 0.5 * 2 / 4)

    def test_residuals_are_out_of_fold(self):
        rows, _ = self._toy(25, 6)
        seen = []

        def refit(train):
            seen.append(train.n)
            return fit_exp_only(train, 1.0)

        out = dr_values(fit_exp_only(rows), refit, rows, ValueEstimate(np.full((1, 3), 0.5), np.full(3, 0.5)), 5, 7)
        assert seen == [20] * 5
        folds = cross_fit_partition(25, 5, 7)
        m = folds == 3
        ref = fit_exp_only(rows.take(np.flatnonzero(~m)), 1.0)
        np.testing.assert_allclose(out.residuals[m], rows.y[m] - ref.predict(rows.X[m]), atol=1e-14)

    def test_unbiased_for_underfit_model(self):
        """A constant model is badly biased; the HT correction removes it on average."""
        mus, dms = [], []
        for seed in range(200):
            rows, p = self._toy(60, 100 + seed)
            dm = ValueEstimate(np.full((1, 3), 0.5), np.full(3, 0.5))
            out = dr_values(constant(0.5, 3), lambda tr: constant(0.5, 3), rows, dm, 5, seed)
            mus.append(out.mu_dr)
            dms.append(out.mu_dm)
        mus = np.array(mus)
        se = mus.std(axis=0, ddof=1) / np.sqrt(200)
        assert np.all(np.abs(mus.mean(axis=0) - p) < 3 * se)
        assert np.all(np.abs(np.array(dms).mean(axis=0) - p)[[0, 2]] > 0.2)
