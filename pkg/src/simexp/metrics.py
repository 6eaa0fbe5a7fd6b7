"""Regret, RMSE and cross-cell aggregation."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

EXCESS_FLOOR = 1e-9


def _check_grid(q_hat: np.ndarray, q_true: np.ndarray):
    q_hat = np.asarray(q_hat, dtype=np.float64)
    q_true = np.asarray(q_true, dtype=np.float64)
    if q_hat.shape != q_true.shape or q_hat.ndim != 2:
        raise ValueError("q_hat must cover the full (context, agent) grid")
    if not np.all(np.isfinite(q_hat)):
        raise ValueError("missing grid entries")
    return q_hat, q_true


def greedy_policy(q_hat: np.ndarray) -> np.ndarray:
    """Argmax agent per context; ties go to the smallest agent id."""
    return np.argmax(q_hat, axis=1)


def regret(q_hat, q_true) -> float:
    """Mean true-value shortfall of the argmax policy of ``q_hat``."""
    q_hat, q_true = _check_grid(q_hat, q_true)
    chosen = greedy_policy(q_hat)
    return float(np.mean(q_true.max(axis=1) - q_true[np.arange(q_true.shape[0]), chosen]))


def rmse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def rmse_xa(q_hat, q_ref) -> float:
    return rmse(q_hat, q_ref)


def rmse_agent(mu_hat, mu_ref) -> float:
    return rmse(mu_hat, mu_ref)


@dataclass
class CellReport:
    seed: int
    cell: str
    method: str
    regret: float
    rmse_xa: float
    rmse_agent: float
    rmse_agent_dr: float = float("nan")
    hparams: dict = field(default_factory=dict)
    mu_dm: Sequence[float] = ()
    mu_dr: Sequence[float] = ()

    def __post_init__(self):
        if not self.regret >= 0:
            raise ValueError("regret must be a nonnegative number")


@dataclass
class MethodSummary:
    method: str
    avg_rank: float
    top3_count: int
    excess_pct: float
    macro_regret: float


@dataclass
class CellSummary:
    cell: str
    mean_regret: dict
    se_regret: dict
    n_seeds: dict
    ranks: dict
    winner: str
    runner_up: str
    gap: float


@dataclass
class AggregateReport:
    methods: list
    cells: list

    def method(self, name: str) -> MethodSummary:
        return next(m for m in self.methods if m.method == name)

    def cell(self, key: str) -> CellSummary:
        return next(c for c in self.cells if c.cell == key)

    def winner_map(self) -> dict:
        return {c.cell: (c.winner, c.gap) for c in self.cells}


def seed_mean_se(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def aggregate(reports: Iterable[CellReport], round_digits: int = 12) -> AggregateReport:
    """Seed means, ranks (ties averaged), inclusive top-3, excess and winners.

    Seed means are rounded to ``round_digits`` decimals before ranking so
    that numerically identical methods tie.
    """
    by_cell: dict = defaultdict(lambda: defaultdict(list))
    for r in reports:
        by_cell[r.cell][r.method].append(r.regret)
    if not by_cell:
        raise ValueError("no reports")
    method_sets = {tuple(sorted(m)) for m in by_cell.values()}
    if len(method_sets) != 1:
        raise ValueError("inconsistent method sets across cells")
    methods = list(method_sets.pop())
    cells, rank_acc, top3, excess, macro = [], defaultdict(list), defaultdict(int), defaultdict(list), defaultdict(list)
    for key in sorted(by_cell):
        stats = {m: seed_mean_se(by_cell[key][m]) for m in methods}
        means = np.array([stats[m][0] for m in methods])
        ranks = rankdata(np.round(means, round_digits), method="average")
        best = means.min()
        order = sorted(range(len(methods)), key=lambda i: (round(means[i], round_digits), methods[i]))
        for i, m in enumerate(methods):
            rank_acc[m].append(ranks[i])
            top3[m] += int(ranks[i] <= 3)
            excess[m].append(100.0 * (means[i] - best) / max(best, EXCESS_FLOOR))
            macro[m].append(means[i])
        winner = methods[order[0]]
        runner = methods[order[1]] if len(methods) > 1 else winner
        cells.append(
            CellSummary(
                key,
                {m: stats[m][0] for m in methods},
                {m: stats[m][1] for m in methods},
                {m: len(by_cell[key][m]) for m in methods},
                {m: float(ranks[i]) for i, m in enumerate(methods)},
                winner,
                runner,
                float(means[order[1]] - means[order[0]]) if len(methods) > 1 else 0.0,
            )
        )
    summaries = [
        MethodSummary(m, float(np.mean(rank_acc[m])), top3[m], float(np.mean(excess[m])), float(np.mean(macro[m])))
        for m in methods
    ]
    return AggregateReport(summaries, cells)
