"""Reward-estimator families fit on OBS and EXP rows.

Every family is linear in some feature map of the densified hashed
features and predicts a reward clipped to [0, 1].  Fits that only touch
OBS are shared through :class:`ObsSide`, which holds the OBS moments, the
OBS baseline, its cross-fitted counterpart and the proxy representation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import LinearModel, Moments, ProjectionMap, clip01, fix_signs, orthonormal_complement_fill, pca_fit

FAMILIES = (
    "EXP_ONLY",
    "OBS_ONLY",
    "PROXY_EXP",
    "GROUNDED_LIN",
    "GROUNDED_RICH",
    "GROUNDED_ANCHOR",
    "CVCI",
    "CVCI_RES",
)
PROXY_FAMILIES = {"PROXY_EXP", "GROUNDED_LIN", "GROUNDED_RICH", "GROUNDED_ANCHOR", "CVCI_RES"}
BASELINE_FAMILIES = {"GROUNDED_LIN", "GROUNDED_RICH", "GROUNDED_ANCHOR", "CVCI_RES"}


@dataclass(frozen=True)
class Penalties:
    """Default ridge levels.  Raw-feature and proxy fits use the summed loss."""

    raw: float = 1.0
    proxy: float = 0.1
    proxy_learn: float = 1.0
    rho_b: float = 1.0
    rho_alpha: float = 1.0


@dataclass
class Rows:
    """Dense design rows of one source."""

    X: np.ndarray
    y: np.ndarray
    agents: np.ndarray
    aux: Optional[np.ndarray] = None
    _memo: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.agents = np.asarray(self.agents, dtype=np.int64)
        if not (self.X.shape[0] == self.y.shape[0] == self.agents.shape[0]):
            raise ValueError("rows of X, y and agents must match")

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    def __len__(self) -> int:
        return self.n

    def take(self, idx) -> "Rows":
        idx = np.asarray(idx)
        return Rows(self.X[idx], self.y[idx], self.agents[idx], None if self.aux is None else self.aux[idx])

    def with_y(self, y) -> "Rows":
        return Rows(self.X, np.asarray(y, dtype=np.float64), self.agents, self.aux)

    def memo(self, key, compute: Callable):
        """Cache a quantity derived from these rows.

        Candidates of one tuning grid share the fold rows, so moments and
        feature maps are computed once per fold.
        """
        if key not in self._memo:
            self._memo[key] = compute()
        return self._memo[key]

    def moments(self) -> Moments:
        return self.memo("moments", lambda: Moments.from_rows(self.X, self.y))

    def mapped(self, owner, fn: Optional[Callable] = None) -> np.ndarray:
        """``fn(self.X)`` cached per ``owner`` (``fn`` defaults to ``owner`` itself).

        The owner is stored with the value so its ``id`` cannot be recycled
        while the entry lives.
        """
        fn = owner if fn is None else fn
        key = ("mapped", id(owner))
        return self.memo(key, lambda: (owner, fn(self.X)))[1]


def _mapped(X, owner, fn=None) -> np.ndarray:
    if isinstance(X, Rows):
        return X.mapped(owner, fn)
    return (owner if fn is None else fn)(X)


# ---------------------------------------------------------------------------
# Proxy representation
# ---------------------------------------------------------------------------


@dataclass
class ProxyMap:
    """Proxy representation psi, learned on OBS only."""

    projector: ProjectionMap
    source: str = "aux-label directions"
    n_aux_directions: int = 0

    @property
    def dim(self) -> int:
        return self.projector.out_dim

    def __call__(self, X) -> np.ndarray:
        return self.projector.apply(X)

    def to_dict(self) -> dict:
        return {"source": self.source, "n_aux_directions": self.n_aux_directions, **self.projector.to_dict()}


def learn_proxy(
    obs: Rows, d_psi: int = 20, penalty: float = 1.0, rank_tol: float = 1e-8, x_moments: Optional[Moments] = None
) -> ProxyMap:
    """Learn psi from OBS auxiliary labels.

    A multi-output ridge of the aux labels on the features gives a coefficient
    matrix whose leading left singular vectors are the aux-predictive feature
    directions.  When these are fewer than ``d_psi`` the basis is completed with
    leading principal directions of the OBS features, orthogonalized against
    the aux directions.  Outputs are centered and scaled to unit variance on
    OBS.
    """
    if obs.aux is None:
        raise ValueError("proxy requires aux channel")
    n, d = obs.X.shape
    if n < 10 * d_psi:
        raise ValueError("need at least 10 * d_psi OBS rows")
    if d_psi > d:
        raise ValueError("d_psi exceeds feature dimension")
    if x_moments is None:
        mom = Moments.from_rows(obs.X, obs.aux)
    else:  # reuse the feature scatter; only the aux cross-moments are new
        aux = np.asarray(obs.aux, dtype=np.float64)
        mom = Moments(x_moments.weight, x_moments.sx, aux.sum(axis=0), x_moments.sxx, obs.X.T @ aux)
    W, _ = mom.solve(penalty)
    U, s, _ = np.linalg.svd(W, full_matrices=False)
    k = int(np.sum(s > rank_tol * max(s[0], 1e-300))) if s.size else 0
    aux_dirs = U[:, : min(k, d_psi)].T
    basis = aux_dirs
    if basis.shape[0] < d_psi:
        # principal directions from the d x d scatter matrix (cheaper than an n x d SVD)
        scatter = mom.sxx - np.outer(mom.sx, mom.sx / mom.weight)
        evals, evecs = np.linalg.eigh(0.5 * (scatter + scatter.T))
        keep = evals[::-1] > rank_tol * max(evals[-1], 1e-300)
        vt = evecs[:, ::-1].T[keep]
        basis = orthonormal_complement_fill(aux_dirs, vt, d_psi)
    if basis.shape[0] < d_psi:
        raise ValueError("insufficient rank")
    basis = fix_signs(basis)
    mean = obs.X.mean(axis=0)
    scores = (obs.X - mean) @ basis.T
    sd = scores.std(axis=0)
    if np.any(sd <= 0):
        raise ValueError("insufficient rank")
    return ProxyMap(ProjectionMap(basis, mean, sd), n_aux_directions=int(aux_dirs.shape[0]))


def basis_expand(u: np.ndarray, basis: str) -> np.ndarray:
    if basis == "id":
        return u
    if basis == "poly2":
        return np.hstack([u, u * u])
    raise ValueError(f"unknown basis {basis!r}")


# ---------------------------------------------------------------------------
# Fitted models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RewardModel:
    """A fitted reward predictor with its family-specific prediction form."""

    family: str
    head: LinearModel
    baseline: Optional[LinearModel] = None
    proxy: Optional[ProxyMap] = None
    compress: Optional[ProjectionMap] = None
    basis: Optional[str] = None
    alpha_corr: Optional[float] = None
    lambda_pool: Optional[float] = None
    anchor_b: Optional[float] = None
    hparams: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")

    def _correction_features(self, X) -> np.ndarray:
        psi = _mapped(X, self.proxy)
        if self.compress is not None:
            psi = basis_expand(self.compress.apply(psi), self.basis or "id")
        return psi

    def raw(self, X) -> np.ndarray:
        """Unclipped prediction on a design matrix or on :class:`Rows` (whose feature maps are cached)."""
        if not isinstance(X, Rows):
            X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        fam = self.family
        if fam in ("EXP_ONLY", "OBS_ONLY", "CVCI"):
            return self.head.raw(X.X if isinstance(X, Rows) else X)
        if fam == "PROXY_EXP":
            return self.head.raw(_mapped(X, self.proxy))
        base = _mapped(X, self.baseline, self.baseline.raw)
        corr = self.head.raw(self._correction_features(X))
        if fam == "CVCI_RES":
            return base + corr
        if fam == "GROUNDED_ANCHOR":
            return self.anchor_b * base - self.alpha_corr * corr
        return base - self.alpha_corr * corr

    def predict(self, X) -> np.ndarray:
        """Clipped reward predictions for rows of densified features."""
        return clip01(self.raw(X))

    def to_dict(self) -> dict:
        out = {"family": self.family, "hparams": self.hparams, "head": self.head.to_dict()}
        for name in ("basis", "alpha_corr", "lambda_pool", "anchor_b"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        if self.baseline is not None:
            out["baseline"] = self.baseline.to_dict()
        if self.proxy is not None:
            out["proxy"] = self.proxy.to_dict()
        if self.compress is not None:
            out["compress"] = self.compress.to_dict()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


# ---------------------------------------------------------------------------
# OBS-side artifacts
# ---------------------------------------------------------------------------


def fold_ids(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded size-balanced fold labels (sizes differ by at most one)."""
    if k > n:
        raise ValueError("more folds than rows")
    labels = np.arange(n) % k
    return labels[rng.permutation(n)]


class ObsSide:
    """Everything estimators need from OBS, computed once per cell.

    Holds the OBS raw moments, the OBS-only ridge ``f_OBS`` (summed-loss
    penalty ``pen.raw``), its K-fold cross-fitted predictions on OBS, the proxy
    map and its 16-dimensional standardized compression.
    """

    def __init__(
        self,
        obs: Rows,
        pen: Penalties = Penalties(),
        need_proxy: bool = True,
        d_psi: int = 20,
        d_compress: int = 16,
        cross_folds: int = 5,
        seed: int = 0,
        need_cross_fit: bool = True,
    ):
        if obs.n < 2:
            raise ValueError("need at least 2 OBS rows")
        self.rows = obs
        self.pen = pen
        self.moments = Moments.from_rows(obs.X, obs.y)
        self.baseline = self.moments.solve(pen.raw, space="dense")
        self.baseline_obs = self.baseline.raw(obs.X)
        self._residual_moments = None
        self._tilde_basis: dict = {}
        self.cross_fit = None
        if need_cross_fit:
            rng = np.random.Generator(np.random.PCG64(seed))
            folds = fold_ids(obs.n, cross_folds, rng)
            cf = np.empty(obs.n)
            for k in range(cross_folds):
                m = folds == k
                held = Moments.from_rows(obs.X[m], obs.y[m])
                cf[m] = (self.moments - held).solve(pen.raw).raw(obs.X[m])
            self.cross_fit = cf
        self.proxy = None
        self.compress = None
        if need_proxy:
            self.proxy = learn_proxy(obs, d_psi, pen.proxy_learn, x_moments=self.moments)
            self.psi_obs = self.proxy(obs.X)
            self.compress = pca_fit(self.psi_obs, min(d_compress, d_psi), standardize=True)
            self.psi_tilde_obs = self.compress.apply(self.psi_obs)

    def residual_obs(self) -> np.ndarray:
        return self.rows.y - self.baseline_obs

    def residual_moments(self) -> Moments:
        """Moments of in-sample OBS residuals on psi."""
        if self._residual_moments is None:
            self._residual_moments = Moments.from_rows(self.psi_obs, self.residual_obs())
        return self._residual_moments

    def tilde_basis(self, basis: str) -> np.ndarray:
        if basis not in self._tilde_basis:
            self._tilde_basis[basis] = basis_expand(self.psi_tilde_obs, basis)
        return self._tilde_basis[basis]


# ---------------------------------------------------------------------------
# Fitters
# ---------------------------------------------------------------------------


def _require_proxy(side: ObsSide):
    if side is None or side.proxy is None:
        raise ValueError("proxy missing")


def fit_exp_only(exp: Rows, penalty: float = 1.0) -> RewardModel:
    """Ridge of EXP outcomes on the densified features."""
    if exp.n < 1:
        raise ValueError("need at least 1 EXP row")
    head = exp.moments().solve(penalty, space="dense")
    return RewardModel("EXP_ONLY", head, hparams={"penalty": penalty})


def fit_obs_only(obs: Rows | ObsSide, penalty: float = 1.0) -> RewardModel:
    """Ridge of OBS outcomes on the densified features."""
    if isinstance(obs, ObsSide):
        head = obs.baseline if penalty == obs.pen.raw else obs.moments.solve(penalty, space="dense")
    else:
        if obs.n < 1:
            raise ValueError("need at least 1 OBS row")
        head = Moments.from_rows(obs.X, obs.y).solve(penalty, space="dense")
    return RewardModel("OBS_ONLY", head, hparams={"penalty": penalty})


def fit_proxy_exp(exp: Rows, proxy: ProxyMap, penalty: float = 0.1) -> RewardModel:
    """Ridge of EXP outcomes on the proxy representation."""
    if proxy is None:
        raise ValueError("proxy missing")
    head = Moments.from_rows(exp.mapped(proxy), exp.y).solve(penalty, space="psi")
    return RewardModel("PROXY_EXP", head, proxy=proxy, hparams={"penalty": penalty})


def fit_grounded_linear(
    side: ObsSide,
    exp: Rows,
    alpha_corr: float,
    penalty: float = 0.1,
    baseline: Optional[LinearModel] = None,
    fit_intercept: bool = True,
) -> RewardModel:
    """OBS baseline minus a shrunken psi-linear correction fit on EXP.

    The correction regresses ``f_OBS(z_j) - Y_j`` on ``psi(z_j)``.
    """
    _require_proxy(side)
    base = baseline or side.baseline
    delta = exp.mapped(base, base.raw) - exp.y if baseline is None else base.raw(exp.X) - exp.y
    head = Moments.from_rows(exp.mapped(side.proxy), delta).solve(penalty, fit_intercept, space="psi")
    return RewardModel(
        "GROUNDED_LIN", head, baseline=base, proxy=side.proxy, alpha_corr=float(alpha_corr),
        hparams={"alpha_corr": float(alpha_corr), "penalty": penalty},
    )


def _rich_head(side: ObsSide, exp: Rows, basis: str, tau: float) -> LinearModel:
    feats = exp.memo(("basis", basis), lambda: basis_expand(side.compress.apply(exp.mapped(side.proxy)), basis))
    mom = exp.memo(("rich-moments", basis), lambda: Moments.from_rows(feats, exp.mapped(side.baseline, side.baseline.raw) - exp.y))
    return mom.solve(tau, space=f"psi16-{basis}")


def fit_grounded_rich(side: ObsSide, exp: Rows, basis: str, tau: float, alpha_corr: float) -> RewardModel:
    """Grounded correction on a basis of the compressed proxy."""
    _require_proxy(side)
    head = _rich_head(side, exp, basis, tau)
    return RewardModel(
        "GROUNDED_RICH", head, baseline=side.baseline, proxy=side.proxy, compress=side.compress,
        basis=basis, alpha_corr=float(alpha_corr),
        hparams={"basis": basis, "tau": tau, "alpha_corr": float(alpha_corr)},
    )


def anchor_coefficients(
    y_obs, f_obs_cf, c_obs, y_exp, f_exp, c_exp, lam: float, rho_b: float, rho_alpha: float
) -> tuple[float, float]:
    """Closed-form minimizer in (b, alpha) of the pooled anchored objective.

    Minimizes ``lam * mean_OBS (y - b f + alpha c)^2 + (1 - lam) * mean_EXP
    (y - b f + alpha c)^2 + rho_b (b - 1)^2 + rho_alpha (alpha - 1)^2``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    M = np.diag([rho_b, rho_alpha]).astype(np.float64)
    v = np.array([rho_b, rho_alpha], dtype=np.float64)
    for wt, y, f, c in ((lam, y_obs, f_obs_cf, c_obs), (1.0 - lam, y_exp, f_exp, c_exp)):
        if wt == 0.0 or len(y) == 0:
            continue
        D = np.column_stack([f, -c])
        M += wt * D.T @ D / len(y)
        v += wt * D.T @ y / len(y)
    b, a = np.linalg.solve(M, v)
    return float(b), float(a)


def fit_grounded_anchor(
    side: ObsSide, exp: Rows, basis: str, tau: float, lam: float,
    rho_b: Optional[float] = None, rho_alpha: Optional[float] = None,
) -> RewardModel:
    """Rich correction direction with a weakly anchored pooled (b, alpha)."""
    _require_proxy(side)
    if side.cross_fit is None:
        raise ValueError("anchor requires cross-fitted OBS baseline")
    rho_b = side.pen.rho_b if rho_b is None else rho_b
    rho_alpha = side.pen.rho_alpha if rho_alpha is None else rho_alpha
    head = _rich_head(side, exp, basis, tau)
    c_obs = head.raw(side.tilde_basis(basis))
    c_exp = head.raw(exp.memo(("basis", basis), lambda: basis_expand(side.compress.apply(exp.mapped(side.proxy)), basis)))
    b, a = anchor_coefficients(
        side.rows.y, side.cross_fit, c_obs, exp.y, exp.mapped(side.baseline, side.baseline.raw), c_exp, lam, rho_b, rho_alpha
    )
    return RewardModel(
        "GROUNDED_ANCHOR", head, baseline=side.baseline, proxy=side.proxy, compress=side.compress,
        basis=basis, alpha_corr=a, lambda_pool=float(lam), anchor_b=b,
        hparams={"basis": basis, "tau": tau, "lambda": float(lam), "b": b, "alpha": a},
    )


def pooled_moments(obs_m: Moments, n_obs: int, exp_m: Moments, n_exp: int, lam: float) -> Moments:
    """Moments with row weights ``lam / n_obs`` on OBS and ``(1 - lam) / n_exp`` on EXP."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if n_obs == 0 and n_exp == 0:
        raise ValueError("both datasets empty")
    parts = []
    if lam > 0 and n_obs > 0:
        parts.append(obs_m.scaled(lam / n_obs))
    if lam < 1 and n_exp > 0:
        parts.append(exp_m.scaled((1.0 - lam) / n_exp))
    if not parts:
        raise ValueError("pooling weight leaves no data")
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


def fit_cvci(obs: Rows | ObsSide, exp: Rows, lambda_pool: float, penalty: float = 1.0) -> RewardModel:
    """Pooled OBS+EXP ridge on the densified features.

    Row weights are ``lambda/n_OBS`` and ``(1-lambda)/n_EXP``; the penalty is
    the same mixture of each source's summed-loss penalty divided by its size,
    so ``lambda = 1`` reproduces OBS-only and ``lambda = 0`` EXP-only.
    """
    if isinstance(obs, ObsSide):
        obs_m, n_obs = obs.moments, obs.rows.n
    else:
        obs_m, n_obs = (Moments.from_rows(obs.X, obs.y), obs.n) if obs.n else (None, 0)
    n_exp = exp.n
    exp_m = exp.moments() if n_exp else None
    lam = float(lambda_pool)
    if n_obs == 0:
        lam = 0.0
    if n_exp == 0:
        lam = 1.0
    pooled = pooled_moments(obs_m, n_obs, exp_m, n_exp, lam)
    eff_pen = (lam / n_obs if n_obs else 0.0) * penalty + ((1 - lam) / n_exp if n_exp else 0.0) * penalty
    head = pooled.solve(eff_pen, space="dense")
    return RewardModel("CVCI", head, lambda_pool=lam, hparams={"lambda": lam, "penalty": penalty})


def fit_cvci_residual(side: ObsSide, exp: Rows, lambda_pool: float, penalty_psi: float) -> RewardModel:
    """Pooled psi-space ridge on residuals around the OBS baseline."""
    _require_proxy(side)
    lam = float(lambda_pool)
    n_obs, n_exp = side.rows.n, exp.n
    obs_m = side.residual_moments()
    exp_m = None
    if n_exp:
        exp_m = exp.memo(
            "residual-moments", lambda: Moments.from_rows(exp.mapped(side.proxy), exp.y - exp.mapped(side.baseline, side.baseline.raw))
        )
    if n_exp == 0:
        lam = 1.0
    pooled = pooled_moments(obs_m, n_obs, exp_m, n_exp, lam)
    head = pooled.solve(penalty_psi, space="psi")
    return RewardModel(
        "CVCI_RES", head, baseline=side.baseline, proxy=side.proxy, lambda_pool=lam,
        hparams={"lambda": lam, "penalty_psi": penalty_psi},
    )


# ---------------------------------------------------------------------------
# Grids and uniform fitter interface
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Grids:
    alpha_corr: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    cvci_lambda: tuple = (0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0)
    residual_penalty: tuple = (0.01, 0.1, 1.0, 10.0)
    rich_tau: tuple = (0.01, 1.0, 100.0)
    rich_basis: tuple = ("id", "poly2")
    anchor_lambda: tuple = (0.0, 0.01, 0.03, 0.1, 0.3, 1.0)


def candidate_grid(family: str, grids: Grids = Grids()) -> list[dict]:
    """Hyperparameter candidates of a family (a single empty dict when untuned)."""
    if family in ("EXP_ONLY", "OBS_ONLY", "PROXY_EXP"):
        return [{}]
    if family == "GROUNDED_LIN":
        return [{"alpha_corr": a} for a in grids.alpha_corr]
    if family == "GROUNDED_RICH":
        return [
            {"basis": b, "tau": t, "alpha_corr": a}
            for b in grids.rich_basis for t in grids.rich_tau for a in grids.alpha_corr
        ]
    if family == "GROUNDED_ANCHOR":
        return [{"basis": b, "tau": t, "lambda": l} for b in grids.rich_basis for t in grids.rich_tau for l in grids.anchor_lambda]
    if family == "CVCI":
        return [{"lambda": l} for l in grids.cvci_lambda]
    if family == "CVCI_RES":
        return [{"lambda": l, "penalty_psi": p} for l in grids.cvci_lambda for p in grids.residual_penalty]
    raise ValueError(f"unknown family {family!r}")


def make_fitter(family: str, side: Optional[ObsSide], pen: Penalties = Penalties()) -> Callable[[dict, Rows], RewardModel]:
    """``fitter(params, exp_rows) -> RewardModel`` with OBS held fixed."""
    if family == "EXP_ONLY":
        return lambda p, exp: fit_exp_only(exp, pen.raw)
    if family == "OBS_ONLY":
        model = fit_obs_only(side, pen.raw)
        return lambda p, exp: model
    if family == "PROXY_EXP":
        return lambda p, exp: fit_proxy_exp(exp, side.proxy, pen.proxy)
    if family == "GROUNDED_LIN":
        return lambda p, exp: fit_grounded_linear(side, exp, p["alpha_corr"], pen.proxy)
    if family == "GROUNDED_RICH":
        return lambda p, exp: fit_grounded_rich(side, exp, p["basis"], p["tau"], p["alpha_corr"])
    if family == "GROUNDED_ANCHOR":
        return lambda p, exp: fit_grounded_anchor(side, exp, p["basis"], p["tau"], p["lambda"])
    if family == "CVCI":
        return lambda p, exp: fit_cvci(side, exp, p["lambda"], pen.raw)
    if family == "CVCI_RES":
        return lambda p, exp: fit_cvci_residual(side, exp, p["lambda"], p["penalty_psi"])
    raise ValueError(f"unknown family {family!r}")
