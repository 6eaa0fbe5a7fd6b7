"""Numerical oracles for the grounding and pooling results.

Population statements are checked on an empirical distribution with finite
support (uniform weights over ``n`` points by default), where the risk
``R(f) = sigma^2 + ||f - r*||_E^2`` and every projection are exact linear
algebra.  Each ``check_*`` returns a :class:`CheckReport` with the largest
violation seen; :func:`run_all` runs every check on seeded random instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass
class RiskInstance:
    """Finite-support distribution ``P_E`` with features, target and baseline.

    Attributes
    ----------
    psi, phi : (n, k) arrays
        Proxy and raw feature values at the support points.
    weights : (n,) array
        Probabilities of the support points.
    r_star : (n,) array
        Causal target.
    f_obs : (n,) array
        Baseline predictions.
    sigma : float
        Outcome noise level, so the irreducible risk is ``sigma**2``.
    """

    psi: np.ndarray
    phi: np.ndarray
    weights: np.ndarray
    r_star: np.ndarray
    f_obs: np.ndarray
    sigma: float = 0.5

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must form a distribution")
        n = self.weights.shape[0]
        for name in ("psi", "phi"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} has the wrong number of rows")
        if self.r_star.shape != (n,) or self.f_obs.shape != (n,):
            raise ValueError("r_star and f_obs need one value per support point")

    @property
    def bias(self) -> np.ndarray:
        """``b = f_OBS - r*``."""
        return self.f_obs - self.r_star

    def inner(self, u, v) -> float:
        return float(np.sum(self.weights * u * v))

    def norm2(self, u) -> float:
        return self.inner(u, u)

    def risk(self, f) -> float:
        return self.sigma**2 + self.norm2(np.asarray(f) - self.r_star)


@dataclass
class CheckReport:
    name: str
    max_violation: float
    tolerance: float
    n_instances: int = 1
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_violation <= self.tolerance) and not self.details.get("failed_assertions")

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max violation {self.max_violation:.3e} (tol {self.tolerance:.0e}, {self.n_instances} instances)"


def random_instance(seed: int, n: int = 512, d_psi: int = 5, d_phi: int = 8, sigma: float = 0.5) -> RiskInstance:
    """Gaussian features, nonlinear target and a biased linear baseline."""
    rng = np.random.Generator(np.random.PCG64(seed))
    psi = rng.normal(size=(n, d_psi))
    phi = np.column_stack([psi[:, :2], rng.normal(size=(n, d_phi - 2))])
    r_star = np.tanh(phi @ rng.normal(size=d_phi)) + 0.3 * psi[:, 0] ** 2
    f_obs = r_star + psi @ rng.normal(scale=0.4, size=d_psi) + 0.2 * rng.normal(size=n)
    return RiskInstance(psi, phi, np.full(n, 1.0 / n), r_star, f_obs, sigma)


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------


def centered_ridge(psi_matrix, targets, penalty: float, beta_obs) -> np.ndarray:
    """``(Psi^T Psi + lambda I)^{-1} (Psi^T Y + lambda beta_OBS)``, solved directly."""
    if penalty <= 0:
        raise ValueError("centered ridge needs a positive penalty")
    Psi = np.asarray(psi_matrix, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    lhs = Psi.T @ Psi + penalty * np.eye(Psi.shape[1])
    return np.linalg.solve(lhs, Psi.T @ y + penalty * np.asarray(beta_obs, dtype=np.float64))


def l2_project(b_values, psi_matrix, weights) -> tuple[np.ndarray, np.ndarray]:
    """Weighted least-squares projection of ``b`` on the column span of ``psi``.

    Returns the projection ``h_dagger`` and the residual ``b - h_dagger``.
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("weights must form a distribution")
    b = np.asarray(b_values, dtype=np.float64)
    Psi = np.asarray(psi_matrix, dtype=np.float64)
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(Psi * sw[:, None], b * sw, rcond=None)
    h = Psi @ coef
    return h, b - h


def _distance(inst: RiskInstance, target, basis) -> float:
    _, resid = l2_project(target, basis, inst.weights)
    return float(np.sqrt(inst.norm2(resid)))


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------


def check_centered_ridge(seed: int, n: int = 64, d: int = 5, penalty: float = 2.0) -> CheckReport:
    """Closed form versus ``beta_OBS + ridge(Y - Psi beta_OBS)`` (the grounded route)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    Psi = rng.normal(size=(n, d))
    beta_obs = rng.normal(size=d)
    y = Psi @ rng.normal(size=d) + rng.normal(size=n)
    closed = centered_ridge(Psi, y, penalty, beta_obs)
    corr = np.linalg.solve(Psi.T @ Psi + penalty * np.eye(d), Psi.T @ (y - Psi @ beta_obs))
    viol = float(np.max(np.abs(closed - (beta_obs + corr))) / max(1.0, np.max(np.abs(closed))))
    return CheckReport("centered ridge", viol, 1e-8)


def check_oracle_grounding_gain(inst: RiskInstance, alphas: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0, 1.5)) -> CheckReport:
    """``R(f_OBS - alpha h_dagger) = R(f_OBS) - (2 alpha - alpha^2) ||h_dagger||^2``."""
    h, _ = l2_project(inst.bias, inst.psi, inst.weights)
    r_obs = inst.risk(inst.f_obs)
    hh = inst.norm2(h)
    viol, failed = 0.0, []
    for a in alphas:
        lhs = inst.risk(inst.f_obs - a * h)
        rhs = r_obs - (2 * a - a * a) * hh
        viol = max(viol, abs(lhs - rhs))
        if 0.0 <= a <= 1.0 and lhs > r_obs + 1e-12:
            failed.append(f"risk increased at alpha={a}")
    return CheckReport("oracle grounding gain", viol, 1e-10, details={"failed_assertions": failed, "h_norm2": hh})


def check_noisy_correction_identity(inst: RiskInstance, h_tilde, alpha: float) -> CheckReport:
    """``R(f_OBS - alpha h) - R(f_OBS) = alpha^2 ||h||^2 - 2 alpha <b, h>`` for arbitrary ``h``."""
    h = np.asarray(h_tilde, dtype=np.float64)
    delta = inst.risk(inst.f_obs - alpha * h) - inst.risk(inst.f_obs)
    formula = alpha**2 * inst.norm2(h) - 2 * alpha * inst.inner(inst.bias, h)
    return CheckReport(
        "noisy-correction identity", abs(delta - formula), 1e-10, details={"delta_risk": delta, "formula": formula}
    )


def check_residual_vs_pooling(inst: RiskInstance, phi_matrix=None, psi_matrix=None) -> CheckReport:
    """Oracle residual risk beats oracle pooled risk exactly when its distance is smaller.

    Residual class: ``f_OBS + span(psi)``; pooled class: ``span(phi)``.
    """
    phi = inst.phi if phi_matrix is None else np.asarray(phi_matrix)
    psi = inst.psi if psi_matrix is None else np.asarray(psi_matrix)
    h, _ = l2_project(inst.r_star - inst.f_obs, psi, inst.weights)
    f_res = inst.f_obs + h
    f_pool, _ = l2_project(inst.r_star, phi, inst.weights)
    d_res = _distance(inst, inst.r_star - inst.f_obs, psi)
    d_pool = _distance(inst, inst.r_star, phi)
    risk_res, risk_pool = inst.risk(f_res), inst.risk(f_pool)
    viol = max(abs(risk_res - inst.sigma**2 - d_res**2), abs(risk_pool - inst.sigma**2 - d_pool**2))
    failed = []
    if (risk_res <= risk_pool + 1e-12) != (d_res <= d_pool + 1e-12):
        failed.append("risk order disagrees with distance order")
    return CheckReport(
        "residual vs pooling", viol, 1e-10,
        details={"failed_assertions": failed, "d_res": d_res, "d_pool": d_pool, "risk_res": risk_res, "risk_pool": risk_pool},
    )


@dataclass
class CorollaryReport:
    risk_grounded: float
    risk_exp: float
    mc_grounded: float
    mc_exp: float
    se_grounded: float
    se_exp: float
    grounded_better: bool
    condition_lhs: float
    condition_rhs: float

    @property
    def mc_z(self) -> tuple[float, float]:
        """|closed form - Monte Carlo| in Monte Carlo standard errors, for each estimator."""
        return (
            abs(self.risk_grounded - self.mc_grounded) / max(self.se_grounded, 1e-300),
            abs(self.risk_exp - self.mc_exp) / max(self.se_exp, 1e-300),
        )


def check_obs_center_corollary(
    psi_matrix, beta_star, beta_obs, sigma: float, penalty: float, G=None, n_mc: int = 10_000, seed: int = 0
) -> CorollaryReport:
    """Conditional ``G``-weighted coefficient risk of the OBS-centered and plain ridge.

    With ``Y = Psi beta* + sigma eps``, ``S = Psi^T Psi`` and ``A = (S + lambda I)^{-1}``
    the closed forms are ``lambda^2 v^T A G A v + sigma^2 tr(G A S A)`` with
    ``v = beta* - beta_OBS`` (centered) or ``v = beta*`` (plain).  Both are
    also estimated by Monte Carlo over ``n_mc`` noise draws.
    """
    Psi = np.asarray(psi_matrix, dtype=np.float64)
    n, d = Psi.shape
    G = np.eye(d) if G is None else np.asarray(G, dtype=np.float64)
    if np.min(np.linalg.eigvalsh(0.5 * (G + G.T))) < -1e-12:
        raise ValueError("G must be positive semidefinite")
    bs, bo = np.asarray(beta_star, float), np.asarray(beta_obs, float)
    S = Psi.T @ Psi
    A = np.linalg.inv(S + penalty * np.eye(d))
    AGA = A @ G @ A
    var = sigma**2 * np.trace(G @ A @ S @ A)
    lhs = float((bs - bo) @ AGA @ (bs - bo))
    rhs = float(bs @ AGA @ bs)
    risk_g = penalty**2 * lhs + var
    risk_e = penalty**2 * rhs + var
    rng = np.random.Generator(np.random.PCG64(seed))
    Y = Psi @ bs + sigma * rng.normal(size=(n_mc, n))
    XtY = Y @ Psi  # (n_mc, d)
    est_e = XtY @ A.T
    est_g = (XtY + penalty * bo) @ A.T
    loss_g = np.einsum("ij,jk,ik->i", est_g - bs, G, est_g - bs)
    loss_e = np.einsum("ij,jk,ik->i", est_e - bs, G, est_e - bs)
    se = lambda v: float(v.std(ddof=1) / np.sqrt(v.size))
    return CorollaryReport(
        float(risk_g), float(risk_e), float(loss_g.mean()), float(loss_e.mean()), se(loss_g), se(loss_e),
        bool(lhs <= rhs), lhs, rhs,
    )


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------


def _merge(name: str, reports: Sequence[CheckReport], tol: float) -> CheckReport:
    failed = [f for r in reports for f in r.details.get("failed_assertions", [])]
    return CheckReport(name, max(r.max_violation for r in reports), tol, len(reports), {"failed_assertions": failed})


def corollary_suite(seed: int) -> tuple[float, list, list]:
    """Tie-case violation, failed assertions and Monte Carlo z-scores for one instance."""
    rng = np.random.Generator(np.random.PCG64(seed))
    n, d = 40, 4
    Psi = rng.normal(size=(n, d))
    bs = rng.normal(size=d)
    L = rng.normal(size=(d, d))
    G = L @ L.T if seed % 2 else np.eye(d)  # alternate identity and anisotropic G
    sigma, pen = 0.7, 3.0
    failed = []
    same = check_obs_center_corollary(Psi, bs, bs, sigma, pen, G, seed=seed)
    if not same.risk_grounded <= same.risk_exp + 1e-12:
        failed.append("zero-bias center not better than EXP")
    tie = check_obs_center_corollary(Psi, bs, 2 * bs, sigma, pen, G, n_mc=2, seed=seed)
    viol = abs(tie.risk_grounded - tie.risk_exp) / max(1.0, tie.risk_exp)
    flip = check_obs_center_corollary(Psi, bs, -bs, sigma, pen, G, seed=seed)
    if flip.grounded_better or not abs(flip.condition_lhs - 4 * flip.condition_rhs) <= 1e-9 * max(1.0, flip.condition_rhs):
        failed.append("sign-flipped center not worse by the factor-4 form")
    rand = check_obs_center_corollary(Psi, bs, rng.normal(size=d), sigma, pen, G, seed=seed + 1)
    zs = []
    for rep in (same, flip, rand):
        zs.extend(rep.mc_z)
        if rep.grounded_better != (rep.risk_grounded <= rep.risk_exp):
            failed.append("crossover condition disagrees with closed-form risks")
    return viol, failed, zs


def allowed_exceedances(m: int, z: float = 3.0, level: float = 0.999) -> int:
    """Number of |z| > ``z`` outcomes among ``m`` correct comparisons not exceeded with probability ``level``."""
    from scipy.stats import binom, norm

    return int(binom.ppf(level, m, 2 * norm.sf(z)))


def run_all(n_instances: int = 20, base_seed: int = 0) -> list[CheckReport]:
    """Every check on ``n_instances`` seeded random instances."""
    seeds = [base_seed + i for i in range(n_instances)]
    ridge = [check_centered_ridge(s) for s in seeds]
    insts = [random_instance(s) for s in seeds]
    gain = [check_oracle_grounding_gain(i) for i in insts]
    noisy = []
    for s, inst in zip(seeds, insts):
        rng = np.random.Generator(np.random.PCG64(10_000 + s))
        h = rng.normal(size=inst.r_star.shape)
        noisy.append(check_noisy_correction_identity(inst, h, float(rng.uniform(0, 2))))
        adv = check_noisy_correction_identity(inst, -inst.bias, 1.0)  # anti-aligned correction hurts
        if not adv.details["delta_risk"] > 0:
            adv.details["failed_assertions"] = ["anti-aligned correction did not increase risk"]
        noisy.append(adv)
    pool = [check_residual_vs_pooling(i) for i in insts]
    cor_viol, cor_failed, cor_z = zip(*(corollary_suite(s) for s in seeds))
    zs = np.concatenate(cor_z)
    exceed = int(np.sum(zs > 3.0))
    allowed = allowed_exceedances(zs.size)
    failed = [f for fs in cor_failed for f in fs]
    if exceed > allowed:
        failed.append(f"{exceed} of {zs.size} Monte Carlo comparisons beyond 3 SE (at most {allowed} expected)")
    corollary = CheckReport(
        "OBS-center corollary", float(max(cor_viol)), 1e-10, n_instances,
        {"failed_assertions": failed, "mc_max_z": float(zs.max()), "mc_exceedances": exceed, "mc_comparisons": int(zs.size)},
    )
    return [
        _merge("centered ridge", ridge, 1e-8),
        _merge("oracle grounding gain", gain, 1e-10),
        _merge("noisy-correction identity", noisy, 1e-10),
        _merge("residual vs pooling", pool, 1e-10),
        corollary,
    ]
