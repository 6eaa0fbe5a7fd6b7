"""A small discrete SCM where every identification quantity can be enumerated.

Variables are binary: context ``X``, latent user state ``U``, agent ``A``,
mediator ``M`` and outcome ``Y``.  The structural law is

* ``P(X = 1) = p_x``; ``P(U = 1 | X = x) = p_u[x]``;
* OBS routing ``(1 - beta) * pi_x(a | x) + beta * 1{a = U}`` and EXP routing
  uniform over the two agents;
* ``P(M = 1 | X = x, A = a) = p_m[x, a]``, the simulator law (free of ``U``);
* ``P(Y = 1 | X = x, M = m, U = u) = p_y[x, m, u]``, shared by OBS and EXP.

The causal value is ``q(x, a) = sum_u P(u | x) sum_m p_m(m | x, a) p_y(x, m, u)``.
The EXP+SIM plug-in replaces the inner structural expectation with the EXP
conditional mean ``r*(x, m) = E[Y | x, m, EXP]``; the OBS plug-in uses
``E[Y | x, m, OBS]`` instead, which is biased once routing depends on ``U``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _bern(p1: float, v: int) -> float:
    return p1 if v == 1 else 1.0 - p1


@dataclass
class DiscreteScm:
    beta: float = 0.99
    p_x: float = 0.5
    p_u: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.7]))
    pi_x: np.ndarray = field(default_factory=lambda: np.array([[0.7, 0.3], [0.4, 0.6]]))
    p_m: np.ndarray = field(default_factory=lambda: np.array([[0.2, 0.8], [0.3, 0.9]]))
    p_y: np.ndarray = field(
        default_factory=lambda: np.array([[[0.2, 0.7], [0.4, 0.9]], [[0.1, 0.6], [0.5, 0.8]]])
    )

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        self.p_u, self.pi_x = np.asarray(self.p_u, float), np.asarray(self.pi_x, float)
        self.p_m, self.p_y = np.asarray(self.p_m, float), np.asarray(self.p_y, float)
        if not np.allclose(self.pi_x.sum(axis=1), 1.0):
            raise ValueError("pi_x rows must be distributions")

    # -- routing ---------------------------------------------------------
    def p_a(self, a: int, x: int, u: int, source: str) -> float:
        if source == "EXP":
            return 0.5
        return (1.0 - self.beta) * self.pi_x[x, a] + self.beta * float(a == u)

    # -- exact enumeration -------------------------------------------------
    def joint(self, source: str) -> np.ndarray:
        """``P(x, u, a, m, y)`` as a 2x2x2x2x2 array for one source."""
        P = np.zeros((2, 2, 2, 2, 2))
        for x in range(2):
            for u in range(2):
                for a in range(2):
                    for m in range(2):
                        for y in range(2):
                            P[x, u, a, m, y] = (
                                _bern(self.p_x, x) * _bern(self.p_u[x], u) * self.p_a(a, x, u, source)
                                * _bern(self.p_m[x, a], m) * _bern(self.p_y[x, m, u], y)
                            )
        return P

    def conditional_mean(self, source: str) -> np.ndarray:
        """``E[Y | X = x, M = m, source]`` by enumeration, shape (2, 2)."""
        P = self.joint(source)
        pxmy = P.sum(axis=(1, 2))  # (x, m, y)
        return pxmy[:, :, 1] / pxmy.sum(axis=2)

    def q_true(self) -> np.ndarray:
        """Interventional ``E[Y | do(A = a), X = x]``, shape (2, 2)."""
        q = np.zeros((2, 2))
        for x in range(2):
            for a in range(2):
                q[x, a] = sum(
                    _bern(self.p_u[x], u) * _bern(self.p_m[x, a], m) * self.p_y[x, m, u]
                    for u in range(2) for m in range(2)
                )
        return q

    def sim_plugin(self, r: np.ndarray) -> np.ndarray:
        """``sum_m p_m(m | x, a) r(x, m)``: replay of the simulator over a scoring rule."""
        q = np.zeros((2, 2))
        for x in range(2):
            for a in range(2):
                q[x, a] = sum(_bern(self.p_m[x, a], m) * r[x, m] for m in range(2))
        return q

    # -- sampling ----------------------------------------------------------
    def sample(self, n: int, source: str, rng: np.random.Generator) -> dict:
        x = (rng.random(n) < self.p_x).astype(np.int64)
        u = (rng.random(n) < self.p_u[x]).astype(np.int64)
        if source == "EXP":
            a = (rng.random(n) < 0.5).astype(np.int64)
        else:
            p_a1 = (1.0 - self.beta) * self.pi_x[x, 1] + self.beta * (u == 1)
            a = (rng.random(n) < p_a1).astype(np.int64)
        m = (rng.random(n) < self.p_m[x, a]).astype(np.int64)
        y = (rng.random(n) < self.p_y[x, m, u]).astype(np.int64)
        return {"x": x, "u": u, "a": a, "m": m, "y": y}


@dataclass
class StratifiedEstimate:
    """Plug-in ``q`` from stratified sample means of ``Y`` within (x, m) cells."""

    q_hat: np.ndarray
    se: np.ndarray
    cell_means: np.ndarray
    cell_counts: np.ndarray

    def z_scores(self, q_true: np.ndarray) -> np.ndarray:
        return (self.q_hat - q_true) / self.se


def stratified_obs_plugin(scm: DiscreteScm, data: dict) -> StratifiedEstimate:
    """Estimate ``E[Y | x, m]`` by cell means and push it through the simulator law.

    The standard error treats the four cell means as independent binomial
    means (exact given the cell counts) and propagates them linearly.
    """
    means, counts, var = np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2))
    for x in range(2):
        for m in range(2):
            sel = (data["x"] == x) & (data["m"] == m)
            k = int(sel.sum())
            if k < 2:
                raise ValueError("empty stratum; increase the sample size")
            yb = data["y"][sel].mean()
            means[x, m], counts[x, m] = yb, k
            var[x, m] = yb * (1 - yb) / k
    q_hat = scm.sim_plugin(means)
    se = np.zeros((2, 2))
    for x in range(2):
        for a in range(2):
            se[x, a] = np.sqrt(sum(_bern(scm.p_m[x, a], m) ** 2 * var[x, m] for m in range(2)))
    return StratifiedEstimate(q_hat, se, means, counts)


@dataclass
class IdentificationReport:
    beta: float
    q_true: np.ndarray
    q_exp_sim: np.ndarray
    q_obs_exact: np.ndarray
    obs_estimate: StratifiedEstimate

    @property
    def exp_sim_error(self) -> float:
        return float(np.max(np.abs(self.q_exp_sim - self.q_true)))

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.obs_estimate.z_scores(self.q_true))))


def identification_check(beta: float, n_obs: int = 400_000, seed: int = 0) -> IdentificationReport:
    """Exact EXP+SIM identification and a sampled OBS negative control at ``beta``."""
    scm = DiscreteScm(beta=beta)
    q = scm.q_true()
    q_exp_sim = scm.sim_plugin(scm.conditional_mean("EXP"))
    q_obs = scm.sim_plugin(scm.conditional_mean("OBS"))
    data = scm.sample(n_obs, "OBS", np.random.Generator(np.random.PCG64(seed)))
    return IdentificationReport(beta, q, q_exp_sim, q_obs, stratified_obs_plugin(scm, data))
