"""Direct-method and doubly robust agent values."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .estimators import RewardModel, Rows


@dataclass
class ValueEstimate:
    q_dm: np.ndarray
    mu_dm: np.ndarray
    mu_dr: Optional[np.ndarray] = None
    residuals: Optional[np.ndarray] = None

    def __post_init__(self):
        if np.any(self.q_dm < 0) or np.any(self.q_dm > 1):
            raise ValueError("q_dm must lie in [0, 1]")


def cross_fit_partition(n: int, k: int, seed: int) -> np.ndarray:
    """Seeded fold labels; fold ``f`` gets ``ceil`` or ``floor`` of ``n/k`` rows.

    Lower-numbered folds receive the extra rows, so sizes are
    non-increasing in the fold label.
    """
    if k < 1:
        raise ValueError("need at least one fold")
    if k > n:
        raise ValueError("more folds than EXP rows")
    rng = np.random.Generator(np.random.PCG64(seed))
    return (np.arange(n) % k)[rng.permutation(n)]


def dm_from_predictions(pred: np.ndarray, n_contexts: int, n_agents: int, draws: int) -> ValueEstimate:
    """Average predictions laid out as (context, agent, draw) rows."""
    q = np.asarray(pred, dtype=np.float64).reshape(n_contexts, n_agents, draws).mean(axis=2)
    return ValueEstimate(q, q.mean(axis=0))


def dm_values(model: RewardModel, X_sim, n_contexts: int, n_agents: int, draws: int) -> ValueEstimate:
    """Plug-in values from simulator draws ordered (context, agent, draw).

    ``X_sim`` is a design matrix or :class:`Rows`; the latter caches feature
    maps shared across methods.
    """
    if draws < 1:
        raise ValueError("need at least one simulator draw")
    return dm_from_predictions(model.predict(X_sim), n_contexts, n_agents, draws)


def ht_residual_term(residuals: np.ndarray, agents: np.ndarray, n_agents: int) -> np.ndarray:
    """``(1/n) sum_j 1{A_j = a} |A| eps_j`` under uniform randomization."""
    n = residuals.shape[0]
    return np.bincount(agents, weights=residuals, minlength=n_agents) * n_agents / n


def dr_values(
    model: RewardModel,
    refit: Optional[Callable[[Rows], RewardModel]],
    exp: Rows,
    dm: ValueEstimate,
    k_cf: int = 5,
    seed: int = 0,
) -> ValueEstimate:
    """Add the cross-fitted EXP residual correction to a DM estimate.

    ``refit(train_rows)`` refits the model family without the held-out fold.
    When ``refit`` is None (families that ignore EXP) the full model's
    residuals are used directly.  Agents absent from EXP get no correction.
    """
    n_agents = dm.mu_dm.shape[0]
    if refit is None:
        resid = exp.y - model.predict(exp.X)
    else:
        if k_cf < 2:
            raise ValueError("cross-fitting needs at least 2 folds")
        folds = cross_fit_partition(exp.n, k_cf, seed)
        resid = np.empty(exp.n)
        for f in range(k_cf):
            held = folds == f
            m = refit(exp.take(np.flatnonzero(~held)))
            resid[held] = exp.y[held] - m.predict(exp.X[held])
    mu_dr = dm.mu_dm + ht_residual_term(resid, exp.agents, n_agents)
    return ValueEstimate(dm.q_dm, dm.mu_dm, mu_dr, resid)
