"""Known-truth structural causal model for three-source evaluation.

Contexts are synthetic token streams, the latent user state depends on the
context, the observational router is confounded through the latent state (or
the user segment), and the simulator replays mediators for any
(context, agent) pair.  All sampling is vectorized over row blocks; every
block owns a keyed random stream so that row prefixes are reproducible and
cells of a sweep can share data.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterator, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .core import (
    HASH_DIM,
    SparseVec,
    expect_sigmoid_gaussian,
    hash_token,
    projection_buckets,
    sigmoid,
    splitmix64,
    token_slot,
)

REWARD_MODES = ("scalar", "rubric_smooth", "rubric_sharp", "coding")
ROUTERS = ("mixture", "softmax")
BLOCK = 500
TRUTH_BLOCK = 1000  # contexts per truth-table block; bounds memory for large reference pools


def stream_seed(master_seed: int, *parts) -> int:
    """Avalanche hash of a key tuple; used for every random stream."""
    key = "\x1f".join(str(p) for p in parts)
    return hash_token(key, seed=splitmix64(master_seed))


def stream(master_seed: int, *parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_seed(master_seed, *parts)))


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def zscore(v: np.ndarray) -> np.ndarray:
    sd = v.std()
    return (v - v.mean()) / sd if sd > 0 else np.zeros_like(v)


def sample_categorical(probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of one category per row from shared uniforms."""
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    return (uniforms[:, None] >= cdf).sum(axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# Configuration and parameters
# ---------------------------------------------------------------------------


@dataclass
class GeneratorConfig:
    """Structural knobs of the generator.  Defaults give the benchmark law."""

    n_agents: int = 20
    vocab_size: int = 5000
    zipf_s: float = 1.1
    len_min: int = 40
    len_max: int = 400
    psi_dim: int = 50
    n_segments: int = 4
    d_u: int = 4
    u_var: float = 0.5
    d_hidden: int = 8
    style_tokens: int = 10
    style_strength: tuple = (0.6, 1.4)
    noise_vocab: int = 1000
    noise_tokens: int = 5
    keep_min: float = 0.3
    keep_max: float = 0.9
    # scalar outcome
    w_scale: float = 2.0
    latent_scale: float = 1.5
    sigma_y: float = 0.25
    # aux labels
    n_aux: int = 6
    sigma_z: float = 0.25
    aux_align: float = 0.5
    # routers
    theta_x_scale: float = 0.12
    kappa: float = 1.0
    shortlist_k: int = 5
    confound_align: float = 1.5
    eps_floor: float = 0.05
    xi_scale: float = 3.0
    # rubric / coding maps
    outcome_precision: float = 64.0
    rubric_bias: float = 2.2
    rubric_head_scale: float = 1.0
    claims_bias: float = -2.0
    rubric_major: float = 0.7
    sharp_gamma: float = 16.0
    sharp_claims: float = 0.1
    sharp_center: float = 0.9
    sharp_scale: float = 0.02
    coding_head_scale: float = 1.5
    coding_steep: float = 4.0
    alpha_fix: float = 0.0
    omega_weak: float = 0.0

    def __post_init__(self):
        if self.n_agents < 1 or self.shortlist_k < 1:
            raise ValueError("need at least one agent and a nonempty shortlist")
        if not 0.0 <= self.eps_floor <= 1.0:
            raise ValueError("eps_floor must lie in [0, 1]")
        if self.sigma_y < 0 or self.sigma_z < 0:
            raise ValueError("noise scales must be nonnegative")


@dataclass(frozen=True)
class Heads:
    """Affine maps of the hidden representation, one per row of ``weights``."""

    weights: np.ndarray
    bias: np.ndarray

    def __call__(self, hidden: np.ndarray) -> np.ndarray:
        return hidden @ self.weights.T + self.bias

    @classmethod
    def zeros(cls, k: int, d: int) -> "Heads":
        return cls(np.zeros((k, d)), np.zeros(k))


class Vocabulary:
    """Collision-free token names with their hashed feature slots.

    Context words, per-agent style tokens and noise tokens use disjoint name
    prefixes.  Distinct tokens may still share a hashed index; features are
    accumulated in a compact space of the distinct indices that occur.
    """

    def __init__(self, cfg: GeneratorConfig, dim: int = HASH_DIM, hash_seed: int = 0):
        self.cfg = cfg
        self.dim = dim
        self.n_ctx = cfg.vocab_size
        self.style_offset = self.n_ctx
        self.noise_offset = self.n_ctx + cfg.n_agents * cfg.style_tokens
        names = [f"w{i}" for i in range(cfg.vocab_size)]
        names += [f"s{a}_{k}" for a in range(cfg.n_agents) for k in range(cfg.style_tokens)]
        names += [f"n{i}" for i in range(cfg.noise_vocab)]
        self.names = names
        slots = np.empty(len(names), dtype=np.int64)
        signs = np.empty(len(names))
        for t, name in enumerate(names):
            slots[t], signs[t] = token_slot(name, dim, hash_seed)
        self.slots, self.token_col = np.unique(slots, return_inverse=True)
        self.token_sign = signs
        self.token_matrix = sp.csr_matrix(
            (signs, (np.arange(len(names)), self.token_col)), shape=(len(names), self.slots.size)
        )
        occupancy = np.bincount(self.token_col, minlength=self.slots.size)
        self.collides = occupancy[self.token_col] > 1
        self._proj: dict[tuple[int, int], sp.csr_matrix] = {}
        self._tok_proj: dict[tuple[int, int], sp.csr_matrix] = {}

    @property
    def size(self) -> int:
        return len(self.names)

    def style_cols(self, agent: int) -> np.ndarray:
        k = self.cfg.style_tokens
        return self.style_offset + agent * k + np.arange(k)

    def projection(self, d: int, seed: int) -> sp.csr_matrix:
        """Signed-hash projection restricted to the occupied slots."""
        key = (d, seed)
        if key not in self._proj:
            bucket, sign = projection_buckets(self.slots, d, seed)
            self._proj[key] = sp.csr_matrix(
                (sign, (np.arange(self.slots.size), bucket)), shape=(self.slots.size, d)
            )
        return self._proj[key]

    def token_projection(self, d: int, seed: int) -> sp.csr_matrix:
        """Token counts to projected features (before normalization)."""
        key = (d, seed)
        if key not in self._tok_proj:
            self._tok_proj[key] = (self.token_matrix @ self.projection(d, seed)).tocsr()
        return self._tok_proj[key]


@dataclass
class GeneratorParams:
    """One parameter set of the generator (fixed for a whole run)."""

    cfg: GeneratorConfig
    vocab: Vocabulary = field(repr=False)
    hidden_seed: int
    zipf_cdf: np.ndarray = field(repr=False)
    sketch: np.ndarray = field(repr=False)
    psi_mean: np.ndarray = field(repr=False)
    psi_std: np.ndarray = field(repr=False)
    latent_map: np.ndarray
    w_star: np.ndarray
    lambda_latent: np.ndarray
    keep_rate: np.ndarray
    style_gamma: np.ndarray
    theta_x: np.ndarray
    cost: np.ndarray
    theta_u: np.ndarray
    theta_u_segment: dict
    aux_heads: Heads
    rubric_heads: Heads
    claims_head: Heads
    rubric_weights: np.ndarray
    coding_heads: Heads
    coding_weights: np.ndarray

    @property
    def n_agents(self) -> int:
        return self.cfg.n_agents

    @property
    def kappa(self) -> float:
        return self.cfg.kappa

    @property
    def sigma_y(self) -> float:
        return self.cfg.sigma_y

    @property
    def latent_var(self) -> float:
        """Variance of ``lambda' U`` given the context."""
        return float(self.cfg.u_var * self.lambda_latent @ self.lambda_latent)

    @cached_property
    def hidden_token_map(self) -> tuple[np.ndarray, np.ndarray]:
        """Hidden bucket and combined sign of every token."""
        bucket, sign = projection_buckets(self.vocab.slots, self.cfg.d_hidden, self.hidden_seed)
        col = self.vocab.token_col
        return bucket[col], sign[col] * self.vocab.token_sign

    def with_config(self, **changes) -> "GeneratorParams":
        """Copy with modified config fields (outcome-map knobs only)."""
        return replace(self, cfg=replace(self.cfg, **changes))


def make_params(cfg: Optional[GeneratorConfig] = None, master_seed: int = 0) -> GeneratorParams:
    """Draw the run-level generator parameters from ``master_seed``."""
    cfg = cfg or GeneratorConfig()
    rng = stream(master_seed, "params")
    A, d8, du = cfg.n_agents, cfg.d_hidden, cfg.d_u
    vocab = Vocabulary(cfg)
    ranks = np.arange(1, cfg.vocab_size + 1, dtype=np.float64)
    pmf = ranks ** (-cfg.zipf_s)
    cdf = np.cumsum(pmf / pmf.sum())
    cdf[-1] = 1.0
    sketch = rng.standard_normal((cfg.vocab_size, cfg.psi_dim)) * math.sqrt(cfg.vocab_size)
    latent_map = rng.standard_normal((du, cfg.psi_dim)) / math.sqrt(cfg.psi_dim)
    w_star = rng.standard_normal(d8) * cfg.w_scale
    lam = rng.standard_normal(du) * cfg.latent_scale
    keep = rng.uniform(cfg.keep_min, cfg.keep_max, A)
    gamma = rng.uniform(cfg.style_strength[0], cfg.style_strength[1], A)
    theta_x = rng.standard_normal((A, cfg.psi_dim)) * cfg.theta_x_scale
    cost = rng.uniform(0.0, 1.0, A)
    u_noise = rng.standard_normal((A, du)) * 0.5
    seg_noise = rng.standard_normal((A, cfg.n_segments)) * 0.5
    # aux heads: the first leans on w*, the rest are random directions
    aux_w = rng.standard_normal((cfg.n_aux, d8))
    aux_w[0] = cfg.aux_align * w_star + (1 - cfg.aux_align) * aux_w[0] * cfg.w_scale
    aux_b = rng.standard_normal(cfg.n_aux) * 0.3
    rub_w = rng.standard_normal((4, d8)) * cfg.rubric_head_scale
    claims_w = rng.standard_normal((1, d8)) * cfg.rubric_head_scale
    code_w = rng.standard_normal((4, d8)) * cfg.coding_head_scale
    code_b = rng.standard_normal(4) * 0.3
    code_users = np.column_stack([rng.uniform(0.3, 0.7, 4), rng.uniform(0.2, 2.0, (4, 3))])
    hidden_seed = stream_seed(master_seed, "hidden-map")

    minor = (1.0 - cfg.rubric_major) / 3.0
    rubric_weights = np.full((4, 4), minor)
    np.fill_diagonal(rubric_weights, cfg.rubric_major)
    # coding: c1 is a steep head orthogonal to the aux directions, aux[:3] = c2..c4
    aux_w[1:4] = code_w[1:4]
    aux_b[1:4] = code_b[1:4]
    basis, _ = np.linalg.qr(aux_w.T)
    c1 = code_w[0] - basis @ (basis.T @ code_w[0])
    if np.linalg.norm(c1) > 1e-8:
        code_w[0] = c1 / np.linalg.norm(c1) * cfg.coding_head_scale

    params = GeneratorParams(
        cfg=cfg,
        vocab=vocab,
        hidden_seed=hidden_seed,
        zipf_cdf=cdf,
        sketch=sketch,
        psi_mean=np.zeros(cfg.psi_dim),
        psi_std=np.ones(cfg.psi_dim),
        latent_map=latent_map,
        w_star=w_star,
        lambda_latent=lam,
        keep_rate=keep,
        style_gamma=gamma,
        theta_x=theta_x,
        cost=cost,
        theta_u=np.zeros((A, du)),
        theta_u_segment={},
        aux_heads=Heads(aux_w, aux_b),
        rubric_heads=Heads(rub_w, np.full(4, cfg.rubric_bias)),
        claims_head=Heads(claims_w, np.array([cfg.claims_bias])),
        rubric_weights=rubric_weights,
        coding_heads=Heads(code_w, code_b),
        coding_weights=code_users,
    )
    # standardize the context embedding on a reference sample
    ref = sample_contexts(stream(master_seed, "psi-reference"), 2000, params, standardize=False)
    params.psi_mean = ref.psi_x.mean(axis=0)
    params.psi_std = ref.psi_x.std(axis=0) + 1e-12

    # agent quality on reference draws fixes the confounding direction
    probe = sample_contexts(stream(master_seed, "quality-probe"), 60, params)
    hid = np.empty((A, probe.n, d8))
    rng_probe = stream(master_seed, "quality-probe-mediators")
    for a in range(A):
        med = sample_mediators(probe.counts, np.full(probe.n, a), rng_probe, params)
        hid[a] = med.hidden
    scalar_quality = (hid @ w_star).mean(axis=1)
    lam_hat = lam / (np.linalg.norm(lam) + 1e-300)
    params.theta_u = -cfg.confound_align * zscore(scalar_quality)[:, None] * lam_hat[None, :] + u_noise

    seg = {}
    s = sigmoid(params.rubric_heads(hid.reshape(-1, d8))).reshape(A, probe.n, 4)
    rub_q = (s @ rubric_weights.T).mean(axis=1)  # (A, segments)
    c = coding_components(hid.reshape(-1, d8), params).reshape(A, probe.n, 4)
    wbar = code_users[:, 1:] / code_users[:, 1:].sum(axis=1, keepdims=True)
    code_q = (c[..., 1:] @ wbar.T).mean(axis=1)
    for name, qual in (("rubric", rub_q), ("coding", code_q), ("scalar", np.repeat(scalar_quality[:, None], 4, 1))):
        adv = qual - qual.mean(axis=1, keepdims=True) if name != "scalar" else qual
        seg[name] = cfg.xi_scale * (zscore(adv.ravel()).reshape(adv.shape) + seg_noise) / 2.0
    params.theta_u_segment = seg
    return params


def reward_family(mode: str) -> str:
    if mode not in REWARD_MODES:
        raise ValueError(f"unknown reward mode {mode!r}")
    return "rubric" if mode.startswith("rubric") else mode


# ---------------------------------------------------------------------------
# Contexts
# ---------------------------------------------------------------------------


@dataclass
class Context:
    """A single synthetic context."""

    id: int
    tokens: Counter
    psi_x: np.ndarray
    segment: int

    def token_list(self) -> list[str]:
        return list(self.tokens.elements())


@dataclass
class ContextSet:
    """A batch of contexts plus their latent states and routing uniforms."""

    ids: np.ndarray
    counts: sp.csr_matrix
    lengths: np.ndarray
    psi_x: np.ndarray
    segment: np.ndarray
    u: np.ndarray
    route_u: np.ndarray

    @property
    def n(self) -> int:
        return int(self.ids.shape[0])

    def take(self, idx) -> "ContextSet":
        idx = np.asarray(idx)
        return ContextSet(
            self.ids[idx], self.counts[idx], self.lengths[idx], self.psi_x[idx],
            self.segment[idx], self.u[idx], self.route_u[idx],
        )

    def prefix(self, n: int) -> "ContextSet":
        return self.take(np.arange(n))

    def context(self, i: int, params: GeneratorParams) -> Context:
        row = self.counts[i]
        toks = Counter({params.vocab.names[j]: int(c) for j, c in zip(row.indices, row.data)})
        return Context(int(self.ids[i]), toks, self.psi_x[i].copy(), int(self.segment[i]))

    @staticmethod
    def concat(parts: Sequence["ContextSet"]) -> "ContextSet":
        return ContextSet(
            np.concatenate([p.ids for p in parts]),
            sp.vstack([p.counts for p in parts], format="csr"),
            np.concatenate([p.lengths for p in parts]),
            np.vstack([p.psi_x for p in parts]),
            np.concatenate([p.segment for p in parts]),
            np.vstack([p.u for p in parts]),
            np.concatenate([p.route_u for p in parts]),
        )


def context_embedding(counts: sp.csr_matrix, lengths: np.ndarray, params: GeneratorParams, standardize=True):
    """Seeded linear sketch of token frequencies, optionally standardized."""
    freq = sp.diags(1.0 / lengths) @ counts
    psi = np.asarray(freq @ params.sketch)
    if standardize:
        psi = (psi - params.psi_mean) / params.psi_std
    return psi


def sample_contexts(rng: np.random.Generator, n: int, params: GeneratorParams, id_offset: int = 0, standardize=True) -> ContextSet:
    """Draw ``n`` contexts (tokens, embedding, segment, latent state, routing uniform)."""
    cfg = params.cfg
    lengths = rng.integers(cfg.len_min, cfg.len_max + 1, size=n)
    total = int(lengths.sum())
    toks = np.searchsorted(params.zipf_cdf, rng.random(total), side="right")
    toks = np.minimum(toks, cfg.vocab_size - 1)
    rows = np.repeat(np.arange(n), lengths)
    counts = sp.csr_matrix((np.ones(total), (rows, toks)), shape=(n, cfg.vocab_size))
    counts.sum_duplicates()
    segment = rng.integers(0, cfg.n_segments, size=n)
    psi = context_embedding(counts, lengths, params, standardize)
    noise = rng.standard_normal((n, cfg.d_u))
    u = psi @ params.latent_map.T + math.sqrt(cfg.u_var) * noise
    route_u = rng.random(n)
    return ContextSet(np.arange(n) + id_offset, counts, lengths, psi, segment, u, route_u)


def sample_context(rng: np.random.Generator, params: GeneratorParams) -> Context:
    cs = sample_contexts(rng, 1, params)
    return cs.context(0, params)


def latent_mean(psi_x: np.ndarray, params: GeneratorParams) -> np.ndarray:
    return psi_x @ params.latent_map.T


# ---------------------------------------------------------------------------
# Routers
# ---------------------------------------------------------------------------


def pi_x(psi_x: np.ndarray, params: GeneratorParams) -> np.ndarray:
    """Context-driven routing component (rows sum to one)."""
    return softmax_rows(psi_x @ params.theta_x.T - params.kappa * params.cost)


def pi_u(u: np.ndarray, params: GeneratorParams) -> np.ndarray:
    """Latent-driven component: uniform over the top-k agents by latent affinity."""
    score = np.atleast_2d(u) @ params.theta_u.T
    k = min(params.cfg.shortlist_k, params.n_agents)
    order = np.argsort(-score, axis=1, kind="stable")[:, :k]
    out = np.zeros_like(score)
    np.put_along_axis(out, order, 1.0 / k, axis=1)
    return out


def mixture_probs(psi_x, u, beta: float, params: GeneratorParams) -> np.ndarray:
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    return (1.0 - beta) * pi_x(np.atleast_2d(psi_x), params) + beta * pi_u(u, params)


def softmax_router_probs(psi_x, segment, beta: float, params: GeneratorParams, family: str = "rubric") -> np.ndarray:
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    eps = params.cfg.eps_floor
    eta = np.atleast_2d(psi_x) @ params.theta_x.T - params.kappa * params.cost
    xi = params.theta_u_segment[family][:, np.atleast_1d(segment)].T
    return (1.0 - eps) * softmax_rows(eta + beta * xi) + eps / params.n_agents


def route_obs_mixture(x: Context, u: np.ndarray, beta: float, params: GeneratorParams, rng) -> int:
    p = mixture_probs(x.psi_x, u, beta, params)
    return int(sample_categorical(p, np.array([rng.random()]))[0])


def route_obs_softmax(x: Context, segment: int, beta: float, params: GeneratorParams, rng, family="rubric") -> int:
    p = softmax_router_probs(x.psi_x, segment, beta, params, family)
    return int(sample_categorical(p, np.array([rng.random()]))[0])


# ---------------------------------------------------------------------------
# Mediators
# ---------------------------------------------------------------------------


@dataclass
class MediatorBatch:
    """Mediator draws as token counts, with their feature norms and hidden map.

    The hashed feature vector of row ``i`` is ``counts[i] @ T / norm[i]`` where
    ``T`` maps tokens to signed hashed slots.
    """

    counts: sp.csr_matrix
    norm: np.ndarray
    hidden: np.ndarray
    vocab: Vocabulary = field(repr=False)

    @property
    def n(self) -> int:
        return int(self.counts.shape[0])

    @cached_property
    def phi(self) -> sp.csr_matrix:
        """Normalized signed hashed features in the compact slot space."""
        raw = (sp.diags(1.0 / self.norm) @ self.counts @ self.vocab.token_matrix).tocsr()
        raw.eliminate_zeros()
        return raw

    def dense(self, d: int, seed: int) -> np.ndarray:
        """Signed-hash projection of each row to ``d`` dims."""
        proj = self.vocab.token_projection(d, seed)
        return (sp.diags(1.0 / self.norm) @ (self.counts @ proj)).toarray()

    def sparse_vec(self, i: int) -> SparseVec:
        row = self.phi[i]
        return SparseVec.from_pairs(self.vocab.slots[row.indices], row.data, self.vocab.dim)

    def take(self, idx) -> "MediatorBatch":
        idx = np.asarray(idx)
        return MediatorBatch(self.counts[idx], self.norm[idx], self.hidden[idx], self.vocab)

    @staticmethod
    def concat(parts: Sequence["MediatorBatch"]) -> "MediatorBatch":
        return MediatorBatch(
            sp.vstack([p.counts for p in parts], format="csr"),
            np.concatenate([p.norm for p in parts]),
            np.vstack([p.hidden for p in parts]),
            parts[0].vocab,
        )


def mediator_token_counts(ctx_counts: sp.csr_matrix, actions: np.ndarray, rng, params: GeneratorParams) -> sp.csr_matrix:
    """Token counts of mediator draws (rows aligned with ``actions``).

    Context tokens are thinned binomially at the agent's keep rate, the
    agent's style tokens are added with a count proportional to the kept
    context norm, and a few uniformly drawn noise tokens are appended.  The
    latent state is never an input.  The result has sorted column indices per
    row and may hold explicit zeros for tokens that were thinned away.
    """
    cfg, vocab = params.cfg, params.vocab
    n = ctx_counts.shape[0]
    actions = np.asarray(actions, dtype=np.int64)
    nnz_per_row = np.diff(ctx_counts.indptr)
    ctx_rows = np.repeat(np.arange(n), nnz_per_row)
    p = params.keep_rate[actions][ctx_rows]
    occ = ctx_counts.data
    kept = np.empty(occ.size)
    single = occ == 1
    kept[single] = rng.random(int(single.sum())) < p[single]
    multi = ~single
    kept[multi] = rng.binomial(occ[multi].astype(np.int64), p[multi])
    sq = np.bincount(ctx_rows, weights=kept * kept, minlength=n)
    style_count = np.maximum(1.0, np.rint(params.style_gamma[actions] * np.sqrt(sq / cfg.style_tokens)))
    k, z = cfg.style_tokens, cfg.noise_tokens
    noise = np.sort(rng.integers(0, cfg.noise_vocab, size=(n, z)), axis=1)
    noise_val = np.ones((n, z))
    if z > 1:
        # merge repeated noise tokens into the first occurrence
        for j in range(z - 1, 0, -1):
            dup = noise[:, j] == noise[:, j - 1]
            noise_val[dup, j - 1] += noise_val[dup, j]
            noise_val[dup, j] = 0.0
    width = nnz_per_row + k + z
    indptr = np.concatenate([[0], np.cumsum(width)])
    total = int(indptr[-1])
    indices = np.empty(total, dtype=np.int32)
    data = np.empty(total)
    within = np.arange(occ.size) - np.repeat(ctx_counts.indptr[:-1], nnz_per_row)
    pos = indptr[:-1][ctx_rows] + within
    indices[pos] = ctx_counts.indices
    data[pos] = kept
    tail = indptr[:-1] + nnz_per_row
    style_pos = tail[:, None] + np.arange(k)[None, :]
    indices[style_pos] = vocab.style_offset + actions[:, None] * k + np.arange(k)[None, :]
    data[style_pos] = style_count[:, None]
    noise_pos = tail[:, None] + k + np.arange(z)[None, :]
    indices[noise_pos] = vocab.noise_offset + noise
    data[noise_pos] = noise_val
    return sp.csr_matrix((data, indices, indptr), shape=(n, vocab.size))


def features_from_counts(counts: sp.csr_matrix, params: GeneratorParams) -> MediatorBatch:
    """Feature norms and hidden projection from mediator token counts."""
    vocab = params.vocab
    counts = counts.tocsr()
    n = counts.shape[0]
    rows = np.repeat(np.arange(n), np.diff(counts.indptr))
    cols, vals = counts.indices, counts.data
    sq = np.bincount(rows, weights=vals * vals, minlength=n)
    shared = vocab.collides[cols]
    if shared.any():
        # tokens that share a hashed slot add (or cancel) before squaring
        r, c, v = rows[shared], vocab.token_col[cols[shared]], vals[shared] * vocab.token_sign[cols[shared]]
        key = r * vocab.slots.size + c
        uk, inv = np.unique(key, return_inverse=True)
        tot = np.bincount(inv, weights=v)
        sq += np.bincount(uk // vocab.slots.size, weights=tot * tot, minlength=n)
        sq -= np.bincount(r, weights=v * v, minlength=n)
    norm = np.sqrt(np.maximum(sq, 0.0))
    if np.any(norm == 0):
        raise ValueError("empty context")
    d8 = params.cfg.d_hidden
    bucket, sign = params.hidden_token_map
    hidden = np.bincount(rows * d8 + bucket[cols], weights=vals * sign[cols], minlength=n * d8).reshape(n, d8)
    return MediatorBatch(counts, norm, hidden / norm[:, None], vocab)


def sample_mediators(ctx_counts: sp.csr_matrix, actions, rng, params: GeneratorParams) -> MediatorBatch:
    return features_from_counts(mediator_token_counts(ctx_counts, actions, rng, params), params)


def sample_mediator(x: Context, a: int, rng, params: GeneratorParams) -> tuple[SparseVec, np.ndarray]:
    """One simulator draw for (context, agent): (phi, phi_star)."""
    if not 0 <= a < params.n_agents:
        raise ValueError("unknown agent")
    cols = [int(t[1:]) for t in x.tokens]
    counts = sp.csr_matrix(
        (np.array(list(x.tokens.values()), dtype=float), (np.zeros(len(cols), int), np.array(cols))),
        shape=(1, params.cfg.vocab_size),
    )
    counts.sort_indices()
    med = sample_mediators(counts, np.array([a]), rng, params)
    return med.sparse_vec(0), med.hidden[0]


# ---------------------------------------------------------------------------
# Outcome laws
# ---------------------------------------------------------------------------


def outcome_scalar(hidden: np.ndarray, u: np.ndarray, params: GeneratorParams, rng) -> np.ndarray:
    """``sigmoid(w* . phi* + lambda . u + eps)``; one law for every source."""
    hidden = np.atleast_2d(hidden)
    eps = rng.standard_normal(hidden.shape[0]) * params.sigma_y
    return sigmoid(hidden @ params.w_star + np.atleast_2d(u) @ params.lambda_latent + eps)


def make_aux_labels(hidden: np.ndarray, params: GeneratorParams, rng) -> np.ndarray:
    hidden = np.atleast_2d(hidden)
    heads = params.aux_heads
    noise = rng.standard_normal((hidden.shape[0], heads.weights.shape[0])) * params.cfg.sigma_z
    return sigmoid(heads(hidden) + noise)


def rubric_components(hidden: np.ndarray, params: GeneratorParams) -> tuple[np.ndarray, np.ndarray]:
    """Rubric vector ``s`` in [0,1]^4 and unsupported-claims count in 0..20."""
    hidden = np.atleast_2d(hidden)
    s = sigmoid(params.rubric_heads(hidden))
    claims = np.rint(20.0 * sigmoid(params.claims_head(hidden)[:, 0]))
    return s, claims


def _check_simplex(w: np.ndarray):
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must lie on the simplex")
    return w


def reward_smooth(s, u_claims, w_tau) -> np.ndarray | float:
    w = _check_simplex(w_tau)
    out = np.asarray(s) @ w
    return float(out) if np.ndim(out) == 0 else out


def sharpened_weights(w, gamma: float) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    p = w**gamma
    return p / p.sum()


def reward_sharpened(s, u_claims, w_tau, gamma=16.0, claims_weight=0.1, center=0.9, scale=0.02):
    w = sharpened_weights(_check_simplex(w_tau), gamma)
    lvl = np.clip(np.asarray(s) @ w - claims_weight * np.asarray(u_claims) / 20.0, 0.0, 1.0)
    return sigmoid((lvl - center) / scale)


def coding_components(hidden: np.ndarray, params: GeneratorParams) -> np.ndarray:
    """Component vector ``c`` in [0,1]^4; ``c_1`` (fix success) is steep."""
    z = params.coding_heads(np.atleast_2d(hidden))
    z[:, 0] *= params.cfg.coding_steep
    return sigmoid(z)


def coding_utility(c, w_u, alpha_fix: float, omega_weak: float):
    """Fix-success plus (additive / weakest-link) patch-quality utility.

    ``c`` may be a vector of 4 or a matrix with 4 columns.
    """
    w_u = np.asarray(w_u, dtype=np.float64)
    if np.any(w_u < 0) or w_u[1:].sum() <= 0:
        raise ValueError("degenerate weights")
    if not (0.0 <= alpha_fix <= 1.0 and 0.0 <= omega_weak <= 1.0):
        raise ValueError("alpha_fix and omega_weak must lie in [0, 1]")
    c = np.asarray(c, dtype=np.float64)
    wbar = w_u[1:] / w_u[1:].sum()
    rest = c[..., 1:]
    g = (1 - omega_weak) * (rest @ wbar) + omega_weak * rest.min(axis=-1)
    y = w_u[0] * alpha_fix * c[..., 0] + (1 - w_u[0]) * g
    return float(y) if np.ndim(y) == 0 else y


def segment_rewards(hidden: np.ndarray, params: GeneratorParams, mode: str) -> np.ndarray:
    """Per-segment reward ``g_tau`` (rows x segments) for rubric and coding modes."""
    cfg = params.cfg
    fam = reward_family(mode)
    if fam == "rubric":
        s, claims = rubric_components(hidden, params)
        if mode == "rubric_smooth":
            return np.column_stack([reward_smooth(s, claims, w) for w in params.rubric_weights])
        return np.column_stack([
            reward_sharpened(s, claims, w, cfg.sharp_gamma, cfg.sharp_claims, cfg.sharp_center, cfg.sharp_scale)
            for w in params.rubric_weights
        ])
    if fam == "coding":
        c = coding_components(hidden, params)
        return np.column_stack([coding_utility(c, w, cfg.alpha_fix, cfg.omega_weak) for w in params.coding_weights])
    raise ValueError("segment rewards are defined for rubric and coding modes")


def true_r_star(hidden: np.ndarray, psi_x: np.ndarray, params: GeneratorParams, mode: str = "scalar") -> np.ndarray:
    """Exact EXP conditional mean of the outcome given (context, mediator)."""
    hidden = np.atleast_2d(hidden)
    if mode == "scalar":
        mean = hidden @ params.w_star + np.atleast_2d(psi_x) @ params.latent_map.T @ params.lambda_latent
        return expect_sigmoid_gaussian(mean, params.latent_var + params.sigma_y**2)
    return segment_rewards(hidden, params, mode).mean(axis=1)


def draw_outcomes(hidden, u, segment, params: GeneratorParams, mode: str, rng) -> np.ndarray:
    """Realized outcomes: scalar law, or Beta noise around the segment reward."""
    if mode == "scalar":
        return outcome_scalar(hidden, u, params, rng)
    g = segment_rewards(hidden, params, mode)[np.arange(len(segment)), segment]
    g = np.clip(g, 1e-9, 1 - 1e-9)
    nu = params.cfg.outcome_precision
    return rng.beta(nu * g, nu * (1 - g))


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class ScmSample:
    """One realized row."""

    context_id: int
    latent: np.ndarray
    action: int
    mediator_features: SparseVec
    hidden: np.ndarray
    outcome: float
    aux: Optional[np.ndarray]
    source: str
    segment: int


@dataclass
class Dataset:
    """Column-oriented block of rows from one source."""

    source: str
    contexts: ContextSet
    actions: np.ndarray
    mediators: MediatorBatch
    outcomes: np.ndarray
    aux: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return int(self.actions.shape[0])

    def __len__(self) -> int:
        return self.n

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.source, self.contexts.take(idx), self.actions[idx], self.mediators.take(idx),
            self.outcomes[idx], None if self.aux is None else self.aux[idx],
        )

    def prefix(self, n: int) -> "Dataset":
        return self.take(np.arange(min(n, self.n)))

    def with_outcomes(self, outcomes: np.ndarray) -> "Dataset":
        return replace(self, outcomes=np.asarray(outcomes, dtype=np.float64))

    def rows(self) -> Iterator[ScmSample]:
        for i in range(self.n):
            yield ScmSample(
                int(self.contexts.ids[i]), self.contexts.u[i], int(self.actions[i]),
                self.mediators.sparse_vec(i), self.mediators.hidden[i], float(self.outcomes[i]),
                None if self.aux is None else self.aux[i], self.source, int(self.contexts.segment[i]),
            )


@dataclass
class TruthTable:
    """Ground-truth q over eval contexts and mu over reference contexts."""

    q_true: np.ndarray
    mu_true: np.ndarray
    q_ref: Optional[np.ndarray] = None

    def __post_init__(self):
        for arr in (self.q_true, self.mu_true):
            if np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
                raise ValueError("truth values must lie in [0, 1]")


def route(contexts: ContextSet, beta: float, router: str, params: GeneratorParams, family: str) -> np.ndarray:
    if router == "mixture":
        p = mixture_probs(contexts.psi_x, contexts.u, beta, params)
    elif router == "softmax":
        p = softmax_router_probs(contexts.psi_x, contexts.segment, beta, params, family)
    else:
        raise ValueError(f"unknown router {router!r}")
    return sample_categorical(p, contexts.route_u)


class DataFactory:
    """Memoized, block-keyed data streams for one (run, seed index).

    Contexts of the OBS pool, the EXP pool, the evaluation and the reference
    sets come from separate keyed streams.  OBS rows of a smaller budget are a
    prefix of a larger budget, and the same contexts, routing uniforms and
    mediator streams are reused across confounding levels, which pairs every
    cell of a sweep row by row.
    """

    def __init__(self, params: GeneratorParams, master_seed: int, seed_index: int):
        self.params = params
        self.master_seed = master_seed
        self.seed_index = seed_index
        self._ctx: dict = {}
        self._obs: dict = {}
        self._sim: dict = {}

    def _key(self, *parts):
        return (self.master_seed, *parts, self.seed_index)

    def contexts(self, pool: str, n: int) -> ContextSet:
        offsets = {"obs": 0, "exp": 10**7, "eval": 2 * 10**7, "ref": 3 * 10**7}
        blocks = -(-n // BLOCK)
        have = self._ctx.setdefault(pool, [])
        while len(have) < blocks:
            b = len(have)
            rng = stream(*self._key("ctx", pool, b))
            have.append(sample_contexts(rng, BLOCK, self.params, offsets[pool] + b * BLOCK))
        return ContextSet.concat(have[:blocks]).prefix(n)

    def _mediators(self, pool: str, contexts: ContextSet, actions: np.ndarray) -> MediatorBatch:
        parts = []
        for b, lo in enumerate(range(0, contexts.n, BLOCK)):
            sl = slice(lo, lo + BLOCK)
            rng = stream(*self._key("med", pool, b))
            parts.append(sample_mediators(contexts.counts[sl], actions[sl], rng, self.params))
        return MediatorBatch.concat(parts)

    def _outcomes(self, pool, contexts: ContextSet, med: MediatorBatch, mode: str) -> np.ndarray:
        out = []
        for b, lo in enumerate(range(0, contexts.n, BLOCK)):
            sl = slice(lo, lo + BLOCK)
            rng = stream(*self._key("y", pool, b))
            out.append(draw_outcomes(med.hidden[sl], contexts.u[sl], contexts.segment[sl], self.params, mode, rng))
        return np.concatenate(out)

    def _aux(self, pool, med: MediatorBatch) -> np.ndarray:
        out = []
        for b, lo in enumerate(range(0, med.n, BLOCK)):
            rng = stream(*self._key("z", pool, b))
            out.append(make_aux_labels(med.hidden[lo : lo + BLOCK], self.params, rng))
        return np.vstack(out)

    def obs(self, n: int, beta: float, router: str, mode: str) -> Dataset:
        if n < 1:
            raise ValueError("n_obs must be >= 1")
        fam = reward_family(mode)
        n_full = max(n, max((k[0] for k in self._obs if k[1:] == (beta, router, fam)), default=0))
        key = (n_full, beta, router, fam)
        if key not in self._obs:
            ctx = self.contexts("obs", n_full)
            actions = route(ctx, beta, router, self.params, fam)
            med = self._mediators("obs", ctx, actions)
            self._obs[key] = (ctx, actions, med, self._aux("obs", med))
        ctx, actions, med, aux = self._obs[key]
        y = self._outcomes("obs", ctx, med, mode)
        return Dataset("OBS", ctx, actions, med, y, aux).prefix(n)

    def exp(self, n: int, mode: str) -> Dataset:
        if n < 1:
            raise ValueError("n_exp must be >= 1")
        ctx = self.contexts("exp", n)
        actions = np.minimum((ctx.route_u * self.params.n_agents).astype(np.int64), self.params.n_agents - 1)
        med = self._mediators("exp", ctx, actions)
        y = self._outcomes("exp", ctx, med, mode)
        return Dataset("EXP", ctx, actions, med, y, None)

    def sim(self, pool: str, n_contexts: int, draws: int) -> tuple[ContextSet, MediatorBatch]:
        """SIM replay for every (context, agent, draw); rows ordered (context, agent, draw)."""
        key = (pool, n_contexts, draws)
        if key not in self._sim:
            ctx = self.contexts(pool, n_contexts)
            A = self.params.n_agents
            parts = []
            for a in range(A):
                rng = stream(*self._key("sim", pool, draws, a))
                rows = np.repeat(np.arange(ctx.n), draws)
                parts.append(sample_mediators(ctx.counts[rows], np.full(rows.size, a), rng, self.params))
            med = MediatorBatch.concat(parts)
            # reorder from (agent, context, draw) to (context, agent, draw)
            order = np.arange(A * ctx.n * draws).reshape(A, ctx.n, draws).transpose(1, 0, 2).ravel()
            self._sim[key] = (ctx, med.take(order))
        return self._sim[key]

    def truth(self, mode: str, n_eval: int, n_true: int, b_true: int) -> TruthTable:
        cfg = self.params.cfg
        key = ("truth-table", mode, cfg.alpha_fix, cfg.omega_weak, n_eval, n_true, b_true)
        if key not in self._sim:
            self._sim[key] = self._truth(mode, n_eval, n_true, b_true)
        return self._sim[key]

    def _truth(self, mode: str, n_eval: int, n_true: int, b_true: int) -> TruthTable:
        q_eval = self._q_table("eval", mode, n_eval, b_true)
        q_ref = self._q_table("ref", mode, n_true, b_true)
        return TruthTable(q_eval, q_ref.mean(axis=0), q_ref)

    def _q_table(self, pool, mode, n_ctx, b_true):
        ctx, hid = self.truth_hidden(pool, n_ctx, b_true)
        A = self.params.n_agents
        q = np.empty((n_ctx, A))
        for lo in range(0, n_ctx, TRUTH_BLOCK):
            sl = slice(lo, lo + TRUTH_BLOCK)
            h = hid[sl]
            psi = np.repeat(ctx.psi_x[sl], A * b_true, axis=0)
            r = true_r_star(h.reshape(-1, h.shape[-1]), psi, self.params, mode)
            q[sl] = r.reshape(h.shape[0], A, b_true).mean(axis=2)
        return np.clip(q, 0.0, 1.0)

    def truth_hidden(self, pool: str, n_ctx: int, b_true: int) -> tuple[ContextSet, np.ndarray]:
        """Hidden representations of ``b_true`` truth-stream draws per (context, agent)."""
        key = ("truth", pool, n_ctx, b_true)
        if key not in self._sim:
            ctx = self.contexts(pool, n_ctx)
            A = self.params.n_agents
            hid = np.empty((n_ctx, A, b_true, self.params.cfg.d_hidden))
            rows = np.repeat(np.arange(ctx.n), b_true)
            sub = ctx.counts[rows]
            for a in range(A):
                rng = stream(*self._key("truth-sim", pool, b_true, a))
                m = sample_mediators(sub, np.full(rows.size, a), rng, self.params)
                hid[:, a] = m.hidden.reshape(n_ctx, b_true, -1)
            self._sim[key] = (ctx, hid)
        return self._sim[key]


def true_q(x: Context, a: int, b_true: int, params: GeneratorParams, seed: int, mode: str = "scalar") -> float:
    """SIM average of r* over ``b_true`` fresh mediator draws for one pair."""
    rng = np.random.Generator(np.random.PCG64(seed))
    vals = []
    for _ in range(b_true):
        _, hidden = sample_mediator(x, a, rng, params)
        vals.append(float(np.atleast_1d(true_r_star(hidden, x.psi_x, params, mode))[0]))
    return float(np.mean(vals))


@dataclass
class CellData:
    obs: Dataset
    exp: Dataset
    eval_contexts: ContextSet
    truth: TruthTable


def generate_cell(
    params: GeneratorParams,
    master_seed: int,
    seed_index: int,
    beta: float,
    n_obs: int,
    n_exp: int,
    mode: str = "scalar",
    router: Optional[str] = None,
    n_eval: int = 100,
    n_true: int = 100,
    b_true: int = 256,
    factory: Optional[DataFactory] = None,
) -> CellData:
    """OBS, EXP, evaluation contexts and truth for one cell and seed."""
    router = router or ("mixture" if mode == "scalar" else "softmax")
    f = factory or DataFactory(params, master_seed, seed_index)
    obs = f.obs(n_obs, beta, router, mode)
    exp = f.exp(n_exp, mode)
    truth = f.truth(mode, n_eval, n_true, b_true)
    return CellData(obs, exp, f.contexts("eval", n_eval), truth)
