"""EXP-side hyperparameter selection.

Agent-level cross-validation holds out whole agents and scores held-out
per-agent mean predictions against mean outcomes.  Holdout selection scores
the mean squared error on a reserved slice of EXP.  Near-ties are resolved
toward the more regularized candidate with family-specific ordering keys.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .estimators import RewardModel, Rows

Fitter = Callable[[dict, Rows], RewardModel]
TIE_RTOL = 1e-8


@dataclass
class CvPlan:
    mode: str = "agent_cv"
    folds: int = 4
    holdout_frac: float = 0.3
    effective_mode: Optional[str] = None

    def __post_init__(self):
        if self.mode not in ("agent_cv", "sample_cv_fallback", "exp_holdout", "fixed"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode in ("agent_cv", "sample_cv_fallback") and self.folds < 2:
            raise ValueError("cross-validation needs at least 2 folds")


@dataclass
class Selection:
    params: dict
    loss: float
    effective_mode: str
    losses: list = field(default_factory=list)
    fold_losses: list = field(default_factory=list)

    def trace(self, **extra) -> dict:
        return {
            "selected": self.params,
            "loss": self.loss,
            "effective_mode": self.effective_mode,
            "candidates": [{"params": p, "loss": l} for p, l in self.losses],
            "fold_losses": self.fold_losses,
            **extra,
        }


# ---------------------------------------------------------------------------
# Tie-breaking
# ---------------------------------------------------------------------------


def _canonical(params: dict) -> str:
    return json.dumps(params, sort_keys=True)


def regularization_key(params: dict, family: str = "") -> tuple:
    """Sort key whose minimum is the most regularized candidate.

    CVCI-Residual prefers a larger psi penalty, then a larger pooling weight;
    grounded variants prefer a smaller shrinkage factor (then a larger ridge
    level and the identity basis); CVCI and the anchor prefer a larger
    pooling weight.  The canonical JSON form breaks any remaining tie.
    """
    key: list = []
    if "penalty_psi" in params:
        key.append(-params["penalty_psi"])
    if "alpha_corr" in params:
        key.append(params["alpha_corr"])
    if "tau" in params:
        key.append(-params["tau"])
    if "basis" in params:
        key.append(0 if params["basis"] == "id" else 1)
    if "lambda" in params:
        key.append(-params["lambda"])
    return (*key, _canonical(params))


def tie_break(tied: Sequence[dict], family: str = "") -> dict:
    if not tied:
        raise ValueError("empty candidate list")
    return min(tied, key=lambda p: regularization_key(p, family))


def _select(losses: list[tuple[dict, float]], family: str, rtol: float) -> tuple[dict, float]:
    best = min(l for _, l in losses)
    tol = rtol * max(abs(best), 1e-12)
    tied = [p for p, l in losses if l - best <= tol]
    winner = tie_break(tied, family)
    return winner, next(l for p, l in losses if p is winner)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def agent_fold_loss(pred: np.ndarray, y: np.ndarray, agents: np.ndarray) -> tuple[float, dict]:
    """Count-weighted squared error of per-agent mean prediction vs mean outcome.

    Returns the loss and the normalized weights per held-out agent.
    """
    uniq, inv, counts = np.unique(agents, return_inverse=True, return_counts=True)
    mean_pred = np.bincount(inv, weights=pred) / counts
    mean_y = np.bincount(inv, weights=y) / counts
    w = counts / counts.sum()
    return float(np.sum(w * (mean_pred - mean_y) ** 2)), dict(zip(uniq.tolist(), w.tolist()))


def agent_folds(agents: np.ndarray, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Partition the distinct agents into ``k`` folds after a seeded shuffle."""
    uniq = np.unique(agents)
    perm = uniq[rng.permutation(uniq.size)]
    return [np.sort(perm[i::k]) for i in range(k)]


def agent_cv_select(
    candidates: Sequence[dict],
    fitter: Fitter,
    exp: Rows,
    k_cv: int = 4,
    seed: int = 0,
    family: str = "",
    rtol: float = TIE_RTOL,
) -> Selection:
    """Pick the candidate with the smallest average agent-held-out loss.

    Falls back to sample-level K-fold CV (mean squared error) when EXP
    contains fewer distinct agents than folds.
    """
    if not candidates:
        raise ValueError("empty candidate grid")
    if k_cv < 2:
        raise ValueError("cross-validation needs at least 2 folds")
    rng = np.random.Generator(np.random.PCG64(seed))
    n_agents = np.unique(exp.agents).size
    if n_agents >= max(k_cv, 2):
        mode = "agent_cv"
        folds = [np.isin(exp.agents, f) for f in agent_folds(exp.agents, k_cv, rng)]
    else:
        mode = "sample_cv_fallback"
        k = min(k_cv, exp.n)
        if k < 2:
            raise ValueError("EXP budget too small for cross-validation")
        labels = (np.arange(exp.n) % k)[rng.permutation(exp.n)]
        folds = [labels == i for i in range(k)]
    splits = [(exp.take(np.flatnonzero(~held)), exp.take(np.flatnonzero(held))) for held in folds]
    losses, fold_table = [], []
    for params in candidates:
        per_fold = []
        for train, test in splits:
            model = fitter(params, train)
            pred = model.predict(test.X)
            if mode == "agent_cv":
                per_fold.append(agent_fold_loss(pred, test.y, test.agents)[0])
            else:
                per_fold.append(float(np.mean((pred - test.y) ** 2)))
        losses.append((params, float(np.mean(per_fold))))
        fold_table.append(per_fold)
    best, loss = _select(losses, family, rtol)
    return Selection(best, loss, mode, losses, fold_table)


def holdout_split(n: int, frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n_hold = int(round(frac * n))
    if n_hold < 2 or n - n_hold < 1:
        raise ValueError("EXP budget too small for holdout")
    perm = rng.permutation(n)
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def exp_holdout_select(
    candidates: Sequence[dict],
    fitter: Fitter,
    exp: Rows,
    holdout_frac: float = 0.3,
    seed: int = 0,
    family: str = "",
    rtol: float = TIE_RTOL,
) -> Selection:
    """Fit on a seeded training split of EXP and minimize holdout MSE."""
    if not candidates:
        raise ValueError("empty candidate grid")
    rng = np.random.Generator(np.random.PCG64(seed))
    train, hold = holdout_split(exp.n, holdout_frac, rng)
    tr, te = exp.take(train), exp.take(hold)
    losses = []
    for params in candidates:
        pred = fitter(params, tr).predict(te.X)
        losses.append((params, float(np.mean((pred - te.y) ** 2))))
    best, loss = _select(losses, family, rtol)
    return Selection(best, loss, "exp_holdout", losses, [[l] for _, l in losses])


def select(plan: CvPlan, candidates, fitter: Fitter, exp: Rows, seed: int = 0, family: str = "") -> Selection:
    """Dispatch on the plan; fixed mode returns the first candidate."""
    if plan.mode == "fixed" or len(candidates) == 1 and plan.mode != "agent_cv":
        sel = Selection(dict(candidates[0]), float("nan"), "fixed")
    elif plan.mode == "exp_holdout":
        sel = exp_holdout_select(candidates, fitter, exp, plan.holdout_frac, seed, family)
    else:
        sel = agent_cv_select(candidates, fitter, exp, plan.folds, seed, family)
    plan.effective_mode = sel.effective_mode
    return sel
