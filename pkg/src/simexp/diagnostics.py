"""Doubly robust value diagnostics in an underfit regime.

A deliberately misspecified reward model (OBS-only ridge on a coarse hashed
feature map, trained on heavily confounded logs) is held fixed.  Each seed
draws fresh EXP rows and simulator contexts; the DR correction should remove
the model's bias on average, while DM keeps it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .estimators import Rows, RewardModel, fit_obs_only
from .scm import DataFactory, GeneratorConfig, GeneratorParams, make_params, stream_seed
from .values import dm_values, dr_values

POPULATION_SEED_INDEX = 10**6


@dataclass
class DrStudy:
    """Per-seed DM and DR agent values against a high-precision reference."""

    mu_ref: np.ndarray
    mu_ref_se: np.ndarray
    mu_dm: np.ndarray  # (seeds, agents)
    mu_dr: np.ndarray  # (seeds, agents)
    n_exp: int

    def dr_z_scores(self) -> np.ndarray:
        """Per-agent (seed-mean DR - reference) over the combined standard error."""
        s = self.mu_dr.shape[0]
        se = np.sqrt(self.mu_dr.std(axis=0, ddof=1) ** 2 / s + self.mu_ref_se**2)
        return (self.mu_dr.mean(axis=0) - self.mu_ref) / se

    def dm_z_scores(self) -> np.ndarray:
        s = self.mu_dm.shape[0]
        se = np.sqrt(self.mu_dm.std(axis=0, ddof=1) ** 2 / s + self.mu_ref_se**2)
        return (self.mu_dm.mean(axis=0) - self.mu_ref) / se

    def rmse_agent(self, which: str = "dr") -> float:
        """Agent-level RMSE against the reference, averaged over seeds."""
        mu = self.mu_dr if which == "dr" else self.mu_dm
        return float(np.mean(np.sqrt(np.mean((mu - self.mu_ref) ** 2, axis=1))))


class UnderfitRegime:
    """Fixed underfit model plus a population reference for one parameter set."""

    def __init__(
        self,
        master_seed: int = 7,
        params: Optional[GeneratorParams] = None,
        d_dense: int = 64,
        beta: float = 0.99,
        n_obs: int = 2000,
        n_ref: int = 20000,
        b_ref: int = 4,
    ):
        self.master_seed = master_seed
        self.params = params or make_params(GeneratorConfig(), master_seed)
        self.d_dense = d_dense
        self.dense_seed = stream_seed(master_seed, "densify")
        train = DataFactory(self.params, master_seed, POPULATION_SEED_INDEX + 1)
        obs = train.obs(n_obs, beta, "mixture", "scalar")
        X = obs.mediators.dense(d_dense, self.dense_seed)
        self.model: RewardModel = fit_obs_only(Rows(X, obs.outcomes, obs.actions))
        pop = DataFactory(self.params, master_seed, POPULATION_SEED_INDEX)
        truth = pop.truth("scalar", 1, n_ref, b_ref)
        self.mu_ref = truth.q_ref.mean(axis=0)
        self.mu_ref_se = truth.q_ref.std(axis=0, ddof=1) / np.sqrt(n_ref)

    def values(self, seed_index: int, n_exp: int, n_ctx: int = 20, draws: int = 5, k_cf: int = 5):
        f = DataFactory(self.params, self.master_seed, seed_index)
        exp = f.exp(n_exp, "scalar")
        rows = Rows(exp.mediators.dense(self.d_dense, self.dense_seed), exp.outcomes, exp.actions)
        _, med = f.sim("eval", n_ctx, draws)
        dm = dm_values(self.model, med.dense(self.d_dense, self.dense_seed), n_ctx, self.params.n_agents, draws)
        # the model never sees EXP, so its residuals need no cross-fitting
        return dr_values(self.model, None, rows, dm, k_cf, stream_seed(self.master_seed, "dr", seed_index))

    def study(self, seeds: Sequence[int], n_exp: int, **kw) -> DrStudy:
        vals = [self.values(s, n_exp, **kw) for s in seeds]
        return DrStudy(
            self.mu_ref, self.mu_ref_se, np.array([v.mu_dm for v in vals]), np.array([v.mu_dr for v in vals]), n_exp
        )
