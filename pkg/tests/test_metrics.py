import numpy as np
import pytest

from simexp.metrics import CellReport, aggregate, greedy_policy, regret, rmse_agent, rmse_xa


def truth_grid(seed=0, shape=(6, 4)):
    return np.random.default_rng(seed).random(shape)


class TestRegret:
    def test_perfect(self):
        q = truth_grid()
        assert regret(q, q) == 0.0

    def test_negated_picks_argmin(self):
        q = truth_grid(1)
        expected = np.mean([max(row) - min(row) for row in q.tolist()])
        assert regret(-q, q) == pytest.approx(expected, abs=1e-15)

    def test_constant_picks_agent_zero(self):
        q = truth_grid(2)
        expected = np.mean([max(row) - row[0] for row in q.tolist()])
        assert regret(np.full_like(q, 0.3), q) == pytest.approx(expected, abs=1e-15)

    def test_tie_smallest_id(self):
        np.testing.assert_array_equal(greedy_policy(np.array([[0.2, 0.5, 0.5], [0.1, 0.1, 0.0]])), [1, 0])

    def test_missing_entries(self):
        q = truth_grid()
        bad = q.copy()
        bad[0, 0] = np.nan
        with pytest.raises(ValueError, match="missing grid entries"):
            regret(bad, q)
        with pytest.raises(ValueError):
            regret(q[:, :2], q)


class TestRmse:
    def test_identical(self):
        q = truth_grid()
        assert rmse_xa(q, q) == 0.0

    def test_offset(self):
        q = truth_grid()
        assert rmse_xa(q + 0.07, q) == pytest.approx(0.07)
        assert rmse_agent(np.arange(3.0) - 0.2, np.arange(3.0)) == pytest.approx(0.2)

    def test_hand_grid(self):
        a = np.array([[0.1, 0.4], [0.5, 0.9]])
        b = np.array([[0.2, 0.4], [0.2, 1.0]])
        # squared errors 0.01, 0, 0.09, 0.01
        assert rmse_xa(a, b) == pytest.approx(np.sqrt(0.11 / 4), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            rmse_agent(np.zeros(3), np.zeros(4))


def report(cell, method, reg, seed=0):
    return CellReport(seed, cell, method, reg, 0.0, 0.0)


class TestAggregate:
    def test_single_method(self):
        agg = aggregate([report("c1", "A", 0.1), report("c2", "A", 0.3)])
        m = agg.method("A")
        assert m.avg_rank == 1 and m.excess_pct == 0 and m.top3_count == 2
        assert m.macro_regret == pytest.approx(0.2)

    def test_two_methods_excess(self):
        reps = []
        for c in ("c1", "c2", "c3"):
            reps += [report(c, "A", 0.01), report(c, "B", 0.02)]
        agg = aggregate(reps)
        assert agg.method("A").excess_pct == pytest.approx(0.0)
        assert agg.method("B").excess_pct == pytest.approx(100.0)
        assert agg.winner_map() == {c: ("A", pytest.approx(0.01)) for c in ("c1", "c2", "c3")}

    def test_hand_ranks_with_tie(self):
        regrets = {
            "c1": {"A": 0.1, "B": 0.2, "C": 0.3},
            "c2": {"A": 0.2, "B": 0.2, "C": 0.1},
            "c3": {"A": 0.3, "B": 0.1, "C": 0.2},
        }
        reps = [report(c, m, v) for c, d in regrets.items() for m, v in d.items()]
        agg = aggregate(reps)
        # A: 1, 2.5, 3 ; B: 2, 2.5, 1 ; C: 3, 1, 2
        assert agg.method("A").avg_rank == pytest.approx((1 + 2.5 + 3) / 3)
        assert agg.method("B").avg_rank == pytest.approx((2 + 2.5 + 1) / 3)
        assert agg.method("C").avg_rank == pytest.approx(2.0)
        assert agg.cell("c2").ranks == {"A": 2.5, "B": 2.5, "C": 1.0}
        assert agg.method("A").top3_count == 3

    def test_excess_floor(self):
        agg = aggregate([report("c", "A", 0.0), report("c", "B", 1e-10)])
        assert agg.method("B").excess_pct == pytest.approx(100 * 1e-10 / 1e-9)

    def test_seed_means_and_se(self):
        reps = [report("c", "A", v, s) for s, v in enumerate([0.1, 0.2, 0.3])] + [report("c", "B", 0.5, 0)] * 3
        cs = aggregate(reps).cell("c")
        assert cs.mean_regret["A"] == pytest.approx(0.2)
        assert cs.se_regret["A"] == pytest.approx(0.1 / np.sqrt(3))
        assert cs.winner == "A" and cs.runner_up == "B" and cs.gap == pytest.approx(0.3)

    def test_inconsistent_methods(self):
        with pytest.raises(ValueError, match="inconsistent method sets"):
            aggregate([report("c1", "A", 0.1), report("c2", "B", 0.1)])

    def test_negative_regret_rejected(self):
        with pytest.raises(ValueError):
            report("c", "A", -0.1)
