import numpy as np
import pytest

from simexp.core import LinearModel
from simexp.estimators import RewardModel, Rows, fit_exp_only
from simexp.tuning import (
    CvPlan,
    agent_cv_select,
    agent_fold_loss,
    agent_folds,
    exp_holdout_select,
    holdout_split,
    select,
    tie_break,
)


def constant_model(value, dim=1):
    return RewardModel("EXP_ONLY", LinearModel(np.zeros(dim), float(value)))


def mean_fitter(params, rows):
    """Predicts the training mean plus an offset; easy to score by hand."""
    return constant_model(rows.y.mean() + params.get("offset", 0.0), rows.X.shape[1])


HAND = Rows(
    X=np.zeros((8, 1)),
    y=np.array([0.1, 0.3, 0.2, 0.9, 0.5, 0.7, 0.4, 0.6]),
    agents=np.array([0, 0, 0, 1, 2, 2, 3, 3]),
)


class TestAgentCv:
    def test_hand_fold_losses(self):
        seed = 5
        folds = agent_folds(HAND.agents, 2, np.random.Generator(np.random.PCG64(seed)))
        assert sorted(np.concatenate(folds).tolist()) == [0, 1, 2, 3]
        sel = agent_cv_select([{"offset": 0.0}, {"offset": 0.05}], mean_fitter, HAND, k_cv=2, seed=seed)
        assert sel.effective_mode == "agent_cv"
        y, agents = HAND.y.tolist(), HAND.agents.tolist()
        for c, offset in enumerate((0.0, 0.05)):
            expected = []
            for fold in folds:
                held = set(fold.tolist())
                train = [v for v, a in zip(y, agents) if a not in held]
                pred = sum(train) / len(train) + offset
                n_held = sum(1 for a in agents if a in held)
                loss = 0.0
                for a in sorted(held):
                    ys = [v for v, b in zip(y, agents) if b == a]
                    loss += (len(ys) / n_held) * (pred - sum(ys) / len(ys)) ** 2
                expected.append(loss)
            np.testing.assert_allclose(sel.fold_losses[c], expected, atol=1e-12)
            assert sel.losses[c][1] == pytest.approx(np.mean(expected), abs=1e-12)

    def test_agent_fold_loss_weights(self):
        loss, w = agent_fold_loss(np.array([0.5, 0.5, 0.5]), np.array([0.0, 1.0, 1.0]), np.array([4, 4, 7]))
        assert w == {4: pytest.approx(2 / 3), 7: pytest.approx(1 / 3)}
        assert loss == pytest.approx(2 / 3 * 0.0 + 1 / 3 * 0.25)

    def test_no_leakage(self):
        rng = np.random.default_rng(0)
        exp = Rows(rng.normal(size=(60, 3)), rng.random(60), rng.integers(0, 12, 60))
        seen = []

        def spy(params, rows):
            seen.append(set(rows.agents.tolist()))
            return fit_exp_only(rows)

        seed = 9
        folds = agent_folds(exp.agents, 4, np.random.Generator(np.random.PCG64(seed)))
        agent_cv_select([{}], spy, exp, k_cv=4, seed=seed)
        assert len(seen) == 4
        for train_agents, fold in zip(seen, folds):
            assert not train_agents & set(fold.tolist())
            assert train_agents | set(fold.tolist()) == set(exp.agents.tolist())

    def test_single_candidate_loss_recorded(self):
        sel = agent_cv_select([{"offset": 0.1}], mean_fitter, HAND, k_cv=2, seed=0)
        assert sel.params == {"offset": 0.1}
        assert np.isfinite(sel.loss) and sel.loss == sel.losses[0][1]

    def test_fallback_when_few_agents(self):
        exp = Rows(np.zeros((10, 1)), np.linspace(0, 1, 10), np.array([0, 1] * 5))
        sel = agent_cv_select([{"offset": 0.0}, {"offset": 0.2}], mean_fitter, exp, k_cv=4)
        assert sel.effective_mode == "sample_cv_fallback"
        assert sel.params == {"offset": 0.0}
        plan = CvPlan("agent_cv", folds=4)
        select(plan, [{"offset": 0.0}], mean_fitter, exp)
        assert plan.effective_mode == "sample_cv_fallback"

    def test_empty_grid(self):
        with pytest.raises(ValueError, match="empty candidate grid"):
            agent_cv_select([], mean_fitter, HAND)
        with pytest.raises(ValueError, match="empty candidate grid"):
            exp_holdout_select([], mean_fitter, HAND)

    def test_deterministic_in_seed(self):
        rng = np.random.default_rng(1)
        exp = Rows(rng.normal(size=(80, 4)), rng.random(80), rng.integers(0, 20, 80))
        cands = [{"offset": o} for o in (-0.1, 0.0, 0.1)]
        a = agent_cv_select(cands, mean_fitter, exp, seed=3)
        b = agent_cv_select(cands, mean_fitter, exp, seed=3)
        assert a.losses == b.losses and a.params == b.params


class TestHoldout:
    def test_sizes(self):
        train, hold = holdout_split(20, 0.5, np.random.default_rng(0))
        assert (train.size, hold.size) == (10, 10)
        assert set(train.tolist()) | set(hold.tolist()) == set(range(20))

    def test_too_small(self):
        with pytest.raises(ValueError, match="EXP budget too small for holdout"):
            holdout_split(3, 0.3, np.random.default_rng(0))

    def test_interpolating_candidate_selected(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(30, 3))
        w = np.array([0.1, -0.05, 0.02])
        exp = Rows(X, 0.5 + X @ w, np.zeros(30))

        def fitter(params, rows):
            if params["exact"]:
                return RewardModel("EXP_ONLY", LinearModel(w, 0.5))
            return constant_model(0.5, 3)

        sel = exp_holdout_select([{"exact": False}, {"exact": True}], fitter, exp, 0.3)
        assert sel.params == {"exact": True}
        assert sel.loss == pytest.approx(0.0, abs=1e-28)

    def test_identical_candidates_tie(self):
        cands = [{"alpha_corr": 1.0}, {"alpha_corr": 0.5}]
        fitter = lambda p, rows: constant_model(rows.y.mean())
        exp = Rows(np.zeros((20, 1)), np.linspace(0, 1, 20), np.zeros(20))
        winners = {exp_holdout_select(cands, fitter, exp, seed=s, family="GROUNDED_LIN").params["alpha_corr"] for s in range(5)}
        assert winners == {0.5}


class TestTieBreak:
    def test_residual_prefers_larger_penalty(self):
        tied = [{"lambda": 0.2, "penalty_psi": 0.1}, {"lambda": 0.2, "penalty_psi": 1.0}]
        assert tie_break(tied, "CVCI_RES") == {"lambda": 0.2, "penalty_psi": 1.0}

    def test_residual_then_larger_lambda(self):
        tied = [{"lambda": 0.2, "penalty_psi": 1.0}, {"lambda": 0.9, "penalty_psi": 1.0}]
        assert tie_break(tied, "CVCI_RES")["lambda"] == 0.9

    def test_grounded_prefers_smaller_alpha(self):
        assert tie_break([{"alpha_corr": 1.0}, {"alpha_corr": 0.5}], "GROUNDED_LIN") == {"alpha_corr": 0.5}

    def test_cvci_prefers_larger_lambda(self):
        assert tie_break([{"lambda": 0.25}, {"lambda": 0.75}], "CVCI") == {"lambda": 0.75}

    def test_single(self):
        assert tie_break([{"x": 1}]) == {"x": 1}
        with pytest.raises(ValueError):
            tie_break([])

    def test_agent_cv_uses_tie_rule(self):
        cands = [{"lambda": 0.2, "penalty_psi": 0.1}, {"lambda": 0.2, "penalty_psi": 1.0}]
        fitter = lambda p, rows: constant_model(rows.y.mean())
        sel = agent_cv_select(cands, fitter, HAND, k_cv=2, family="CVCI_RES")
        assert sel.params["penalty_psi"] == 1.0


class TestPlan:
    def test_fixed(self):
        plan = CvPlan("fixed")
        sel = select(plan, [{"a": 1}, {"a": 2}], mean_fitter, HAND)
        assert sel.params == {"a": 1} and plan.effective_mode == "fixed"

    def test_validation(self):
        with pytest.raises(ValueError):
            CvPlan("bogus")
        with pytest.raises(ValueError):
            CvPlan("agent_cv", folds=1)

    def test_trace_serializable(self):
        import json

        sel = agent_cv_select([{"offset": 0.0}, {"offset": 0.1}], mean_fitter, HAND, k_cv=2)
        json.dumps(sel.trace(cell="x"))
