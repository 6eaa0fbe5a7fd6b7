"""Deterministic numerical kernels: hashing, projections, ridge solves, PCA, quadrature."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

HASH_DIM = 2**18
MASK64 = (1 << 64) - 1

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


# ---------------------------------------------------------------------------
# SplitMix64 avalanche (scalar Python ints and vectorized uint64 arrays)
# ---------------------------------------------------------------------------


def splitmix64(x: int) -> int:
    """One SplitMix64 finalization step on a Python int (mod 2**64)."""
    z = (x + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def splitmix64_array(x: np.ndarray) -> np.ndarray:
    """Vectorized :func:`splitmix64` over a uint64 array (wrapping arithmetic)."""
    z = np.asarray(x, dtype=np.uint64) + np.uint64(_GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def hash_token(token: str, seed: int = 0) -> int:
    """64-bit hash of a token string.

    The token's UTF-8 bytes are consumed in little-endian 8-byte words, each
    xor-ed into the running state before an avalanche step; the byte length is
    folded in last so that zero padding cannot alias.
    """
    data = token.encode("utf-8")
    h = splitmix64(seed & MASK64)
    for off in range(0, len(data), 8):
        word = int.from_bytes(data[off : off + 8].ljust(8, b"\0"), "little")
        h = splitmix64(h ^ word)
    return splitmix64(h ^ len(data))


def _sign_of(h: int) -> float:
    return -1.0 if (h >> 63) & 1 else 1.0


def token_slot(token: str, dim: int = HASH_DIM, seed: int = 0) -> tuple[int, float]:
    """Feature index (low bits) and sign (bit 63) of a token."""
    h = hash_token(token, seed)
    return h % dim, _sign_of(h)


# ---------------------------------------------------------------------------
# Vector types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SparseVec:
    """Sparse vector with strictly increasing indices and no stored zeros."""

    indices: np.ndarray
    values: np.ndarray
    dim: int = HASH_DIM

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ValueError("indices and values must be 1-d arrays of equal length")
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.dim):
            raise ValueError("indices must be strictly increasing and inside [0, dim)")
        if np.any(val == 0.0) or not np.all(np.isfinite(val)):
            raise ValueError("values must be finite and nonzero")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @classmethod
    def from_pairs(cls, indices, values, dim: int = HASH_DIM) -> "SparseVec":
        """Build from unsorted, possibly repeated (index, value) pairs; duplicates add up."""
        idx = np.asarray(indices, dtype=np.int64)
        val = np.asarray(values, dtype=np.float64)
        uniq, inv = np.unique(idx, return_inverse=True)
        summed = np.zeros(uniq.size)
        np.add.at(summed, inv, val)
        keep = summed != 0.0
        return cls(uniq[keep], summed[keep], dim)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.values, self.values)))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def __add__(self, other: "SparseVec") -> "SparseVec":
        if self.dim != other.dim:
            raise ValueError("dimension mismatch")
        return SparseVec.from_pairs(
            np.concatenate([self.indices, other.indices]),
            np.concatenate([self.values, other.values]),
            self.dim,
        )


def hash_features(tokens: Iterable[str], dim: int = HASH_DIM, seed: int = 0) -> SparseVec:
    """Signed, L2-normalized hashed bag of tokens.

    Each token contributes ``sign(h) * count`` at ``h mod dim``.  Colliding
    tokens add (and may cancel, in which case the entry is dropped).
    """
    counts = Counter(tokens)
    if not counts:
        raise ValueError("empty context")
    idx = np.empty(len(counts), dtype=np.int64)
    val = np.empty(len(counts))
    for k, (tok, c) in enumerate(counts.items()):
        slot, sign = token_slot(tok, dim, seed)
        idx[k] = slot
        val[k] = sign * c
    vec = SparseVec.from_pairs(idx, val, dim)
    if vec.nnz == 0:
        raise ValueError("empty context")
    return SparseVec(vec.indices, vec.values / vec.norm(), dim)


# ---------------------------------------------------------------------------
# Signed-hash projection
# ---------------------------------------------------------------------------


def projection_buckets(indices: np.ndarray, d: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Bucket in ``[0, d)`` and sign in ``{-1, +1}`` for each input index."""
    key = np.asarray(indices, dtype=np.uint64) ^ np.uint64(splitmix64(seed & MASK64))
    h = splitmix64_array(key)
    bucket = (h % np.uint64(d)).astype(np.int64)
    sign = np.where((h >> np.uint64(63)) & np.uint64(1), -1.0, 1.0)
    return bucket, sign


def signed_hash_project(x: SparseVec, d: int, seed: int) -> np.ndarray:
    """Project a sparse vector to ``d`` dims with a seeded signed hash."""
    if d < 1:
        raise ValueError("d must be >= 1")
    out = np.zeros(d)
    if x.nnz:
        bucket, sign = projection_buckets(x.indices, d, seed)
        np.add.at(out, bucket, sign * x.values)
    return out


def projection_matrix(d: int, seed: int, dim_in: int = HASH_DIM) -> sp.csr_matrix:
    """Sparse ``(dim_in, d)`` matrix equivalent to :func:`signed_hash_project`."""
    rows = np.arange(dim_in, dtype=np.int64)
    bucket, sign = projection_buckets(rows, d, seed)
    return sp.csr_matrix((sign, (rows, bucket)), shape=(dim_in, d))


# ---------------------------------------------------------------------------
# Ridge regression
# ---------------------------------------------------------------------------


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass
class LinearModel:
    """Affine predictor ``w @ z + b`` fit with an L2 penalty on ``w`` only."""

    weights: np.ndarray
    intercept: float = 0.0
    penalty: float = 0.0
    space: str = ""

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.penalty < 0:
            raise ValueError("penalty must be nonnegative")

    @property
    def dim(self) -> int:
        return int(self.weights.shape[0])

    def raw(self, z) -> np.ndarray:
        """Unclipped scores for a vector or a (dense or sparse) row matrix."""
        if sp.issparse(z):
            if z.shape[1] != self.dim:
                raise ValueError(f"dimension mismatch: {z.shape[1]} != {self.dim}")
            return np.asarray(z @ self.weights).ravel() + self.intercept
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.dim:
            raise ValueError(f"dimension mismatch: {z.shape[-1]} != {self.dim}")
        return z @ self.weights + self.intercept

    def to_dict(self) -> dict:
        return {
            "space": self.space,
            "penalty": self.penalty,
            "intercept": self.intercept,
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        return cls(np.asarray(d["weights"]), d["intercept"], d["penalty"], d.get("space", ""))


def clip01(x):
    return np.clip(x, 0.0, 1.0)


def predict_clip(model: LinearModel, z) -> np.ndarray | float:
    """Clipped prediction ``clip(w @ z + b, 0, 1)``."""
    out = clip01(model.raw(z))
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class GramStats:
    """Weighted sufficient statistics for a (centered) least-squares problem.

    ``gram`` and ``cross`` are centered at the weighted means when
    ``centered`` is true, otherwise they are raw second moments.
    """

    total_weight: float
    x_mean: np.ndarray
    y_mean: float
    gram: np.ndarray
    cross: np.ndarray
    centered: bool = True

    @property
    def dim(self) -> int:
        return int(self.x_mean.shape[0])


def _check_finite(*arrays):
    for a in arrays:
        data = a.data if sp.issparse(a) else np.asarray(a)
        if not np.all(np.isfinite(data)):
            raise ValueError("non-finite input (NaN or inf)")


def gram_stats(
    design,
    targets,
    weights: Optional[np.ndarray] = None,
    centered: bool = True,
    chunk: int = 4096,
) -> GramStats:
    """Accumulate weighted Gram statistics, densifying sparse designs in row chunks."""
    y = np.asarray(targets, dtype=np.float64).ravel()
    n = design.shape[0]
    if n != y.shape[0]:
        raise ValueError("rows(design) must equal len(targets)")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    if w.shape[0] != n or np.any(w < 0):
        raise ValueError("weights must be nonnegative with one entry per row")
    _check_finite(design, y, w)
    d = design.shape[1]
    W = float(w.sum())
    if W <= 0:
        raise ValueError("total weight must be positive")
    if sp.issparse(design):
        xs = np.asarray(design.T @ w).ravel()
    else:
        xs = np.asarray(design, dtype=np.float64).T @ w
    x_mean = xs / W
    y_mean = float(w @ y) / W
    G = np.zeros((d, d))
    c = np.zeros(d)
    for lo in range(0, n, chunk):
        blk = design[lo : lo + chunk]
        blk = blk.toarray() if sp.issparse(blk) else np.asarray(blk, dtype=np.float64)
        wb = w[lo : lo + chunk]
        yb = y[lo : lo + chunk]
        if centered:
            blk = blk - x_mean
            yb = yb - y_mean
        G += (blk * wb[:, None]).T @ blk
        c += blk.T @ (wb * yb)
    return GramStats(W, x_mean, y_mean, G, c, centered)


def _cholesky_solve(A: np.ndarray, b: np.ndarray, penalty: float) -> np.ndarray:
    """Symmetric solve with jitter escalation (penalized systems only)."""
    d = A.shape[0]
    jitter = 1e-12 * max(float(np.trace(A)) / max(d, 1), 1e-300)
    M = A
    for attempt in range(4):
        try:
            cf = scipy.linalg.cho_factor(M, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            if penalty == 0.0:
                raise RankDeficientError("rank-deficient design")
            M = A + (jitter * 10**attempt) * np.eye(d)
            continue
        diag = np.abs(np.diag(cf[0]))
        if penalty == 0.0 and d and diag.min() ** 2 <= 1e-13 * max(diag.max() ** 2, 1e-300):
            raise RankDeficientError("rank-deficient design")
        sol = scipy.linalg.cho_solve(cf, b, check_finite=False)
        # one step of iterative refinement against the unjittered system
        sol = sol + scipy.linalg.cho_solve(cf, b - A @ sol, check_finite=False)
        return sol
    raise np.linalg.LinAlgError("normal equations not positive definite after jitter")


def ridge_from_stats(stats: GramStats, penalty: float, space: str = "") -> LinearModel:
    """Solve the penalized normal equations held in ``stats``."""
    if penalty < 0:
        raise ValueError("penalty must be nonnegative")
    d = stats.dim
    if d == 0:
        return LinearModel(np.zeros(0), stats.y_mean if stats.centered else 0.0, penalty, space)
    A = stats.gram + penalty * np.eye(d)
    w = _cholesky_solve(A, stats.cross, penalty)
    b = stats.y_mean - float(stats.x_mean @ w) if stats.centered else 0.0
    return LinearModel(w, b, penalty, space)


def ridge_fit(
    design,
    targets,
    penalty: float,
    weights: Optional[np.ndarray] = None,
    fit_intercept: bool = True,
    space: str = "",
) -> LinearModel:
    """Weighted ridge regression with an unpenalized intercept.

    Minimizes ``sum_i w_i (y_i - x_i @ w - b)**2 + penalty * ||w||**2`` by a
    Cholesky solve of the (weight-centered) normal equations.  A
    rank-deficient design with ``penalty == 0`` raises
    :class:`RankDeficientError`.
    """
    if penalty < 0:
        raise ValueError("penalty must be nonnegative")
    stats = gram_stats(design, targets, weights, centered=fit_intercept)
    return ridge_from_stats(stats, penalty, space)


def normal_equation_residual(design, targets, model: LinearModel, weights=None) -> float:
    """Relative residual of the normal equations at ``model`` (diagnostic)."""
    X = design.toarray() if sp.issparse(design) else np.asarray(design, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=np.float64)
    r = y - model.raw(X)
    grad = X.T @ (w * r) - model.penalty * model.weights
    scale = np.linalg.norm(X.T @ (w * y)) + model.penalty * np.linalg.norm(model.weights) + 1e-300
    return float(np.linalg.norm(grad) / scale)


# ---------------------------------------------------------------------------
# Projections / PCA
# ---------------------------------------------------------------------------


@dataclass
class ProjectionMap:
    """Affine map ``((x - centering) @ matrix.T) / scaling``."""

    matrix: np.ndarray
    centering: Optional[np.ndarray] = None
    scaling: Optional[np.ndarray] = None
    singular_values: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
        out_dim, in_dim = self.matrix.shape
        if out_dim > in_dim:
            raise ValueError("output dim must not exceed input dim")
        if self.scaling is not None:
            self.scaling = np.asarray(self.scaling, dtype=np.float64)
            if np.any(self.scaling <= 0):
                raise ValueError("scaling entries must be positive")

    @property
    def out_dim(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def in_dim(self) -> int:
        return int(self.matrix.shape[1])

    def apply(self, rows) -> np.ndarray:
        if sp.issparse(rows):
            out = np.asarray(rows @ self.matrix.T)
            if self.centering is not None:
                out = out - self.centering @ self.matrix.T
        else:
            rows = np.asarray(rows, dtype=np.float64)
            if self.centering is not None:
                rows = rows - self.centering
            out = rows @ self.matrix.T
        if self.scaling is not None:
            out = out / self.scaling
        return out

    def to_dict(self) -> dict:
        return {
            "matrix": self.matrix.tolist(),
            "centering": None if self.centering is None else self.centering.tolist(),
            "scaling": None if self.scaling is None else self.scaling.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectionMap":
        return cls(
            np.asarray(d["matrix"]),
            None if d["centering"] is None else np.asarray(d["centering"]),
            None if d["scaling"] is None else np.asarray(d["scaling"]),
        )


def fix_signs(components: np.ndarray) -> np.ndarray:
    """Make the first nonzero loading of each row positive."""
    out = components.copy()
    for k in range(out.shape[0]):
        nz = np.flatnonzero(np.abs(out[k]) > 1e-12 * max(np.abs(out[k]).max(), 1e-300))
        if nz.size and out[k, nz[0]] < 0:
            out[k] = -out[k]
    return out


def pca_fit(rows, d: int, standardize: bool = False, rank_tol: float = 1e-10) -> ProjectionMap:
    """Top-``d`` principal directions via thin SVD of the centered rows."""
    X = rows.toarray() if sp.issparse(rows) else np.asarray(rows, dtype=np.float64)
    n, p = X.shape
    if d < 1 or d > p or n < d:
        raise ValueError("need 1 <= d <= cols and rows >= d")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    rank = int(np.sum(s > rank_tol * max(s[0], 1e-300))) if s.size else 0
    if d > rank:
        raise ValueError("insufficient rank")
    comps = fix_signs(vt[:d])
    scaling = None
    if standardize:
        scaling = s[:d] / math.sqrt(max(n - 1, 1))
    return ProjectionMap(comps, mean, scaling, singular_values=s)


def orthonormal_complement_fill(basis: np.ndarray, candidates: np.ndarray, k: int, tol: float = 1e-8) -> np.ndarray:
    """Extend orthonormal rows of ``basis`` with Gram-Schmidt over ``candidates`` up to ``k`` rows."""
    rows = [r for r in np.atleast_2d(basis)] if basis.size else []
    for c in np.atleast_2d(candidates):
        if len(rows) >= k:
            break
        v = c.astype(np.float64).copy()
        for _ in range(2):
            for r in rows:
                v -= (v @ r) * r
        nv = np.linalg.norm(v)
        if nv > tol * max(np.linalg.norm(c), 1e-300):
            rows.append(v / nv)
    return np.vstack(rows) if rows else np.zeros((0, candidates.shape[-1]))


# ---------------------------------------------------------------------------
# Gaussian expectations
# ---------------------------------------------------------------------------


def sigmoid(t):
    t = np.asarray(t, dtype=np.float64)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


_GH_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _hermgauss(nodes: int) -> tuple[np.ndarray, np.ndarray]:
    if nodes not in _GH_CACHE:
        x, w = np.polynomial.hermite.hermgauss(nodes)
        _GH_CACHE[nodes] = (x * math.sqrt(2.0), w / math.sqrt(math.pi))
    return _GH_CACHE[nodes]


def _trapezoid_nodes(sd: float, half_width: float = 10.0) -> tuple[np.ndarray, np.ndarray]:
    """Standard-normal trapezoid rule with step ``0.25 / sd`` on ``[-10, 10]``.

    The sigmoid has poles at ``i * pi``, a distance ``pi / sd`` from the real
    axis in standardized coordinates, so the geometric convergence rate of the
    trapezoid rule stays fixed when the step shrinks with ``sd``.
    """
    h = 0.25 / max(sd, 1.0)
    k = int(math.ceil(half_width / h))
    x = h * np.arange(-k, k + 1)
    w = h * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return x, w


def expect_sigmoid_gaussian(mean, var, nodes: int = 64):
    """``E[sigmoid(mean + N(0, var))]`` by numerical quadrature.

    ``mean`` may be an array and ``var`` a scalar.  Gauss-Hermite with
    ``nodes`` points is used for ``var <= 1``; beyond that its accuracy decays
    with the variance, and a trapezoid rule with a step scaled to the standard
    deviation keeps the error near machine precision up to ``var = 25``.
    """
    if nodes < 16:
        raise ValueError("nodes must be >= 16")
    v = float(var)
    if v < 0:
        raise ValueError("var must be nonnegative")
    m = np.asarray(mean, dtype=np.float64)
    sd = math.sqrt(v)
    x, w = _hermgauss(nodes) if v <= 1.0 else _trapezoid_nodes(sd)
    if m.ndim == 0:
        return float(sigmoid(m + sd * x) @ w)
    # chunked so the (rows x nodes) grid stays small for millions of means
    flat = m.ravel()
    out = np.empty(flat.size)
    step = max(1, (1 << 22) // x.size)
    for lo in range(0, flat.size, step):
        out[lo : lo + step] = sigmoid(flat[lo : lo + step, None] + sd * x) @ w
    return out.reshape(m.shape)


@dataclass
class Moments:
    """Weighted raw moments of ``(x, y)``; sums of moments pool datasets.

    ``y`` may have several columns, in which case the solve is multi-output.
    """

    weight: float
    sx: np.ndarray
    sy: np.ndarray
    sxx: np.ndarray
    sxy: np.ndarray

    @classmethod
    def from_rows(cls, X, y, weights: Optional[np.ndarray] = None, chunk: int = 8192) -> "Moments":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        n = X.shape[0]
        if y.shape[0] != n:
            raise ValueError("rows(design) must equal len(targets)")
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
        if w.shape != (n,) or np.any(w < 0):
            raise ValueError("weights must be nonnegative with one entry per row")
        _check_finite(X, y, w)
        if weights is None:
            sxx = X.T @ X
        else:
            sxx = np.zeros((X.shape[1], X.shape[1]))
            for lo in range(0, n, chunk):
                blk = X[lo : lo + chunk]
                sxx += (blk * w[lo : lo + chunk, None]).T @ blk
        wy = w[:, None] * y if y.ndim == 2 else w * y
        return cls(float(w.sum()), X.T @ w, wy.sum(axis=0), sxx, X.T @ wy)

    def __add__(self, other: "Moments") -> "Moments":
        return Moments(
            self.weight + other.weight, self.sx + other.sx, self.sy + other.sy,
            self.sxx + other.sxx, self.sxy + other.sxy,
        )

    def __sub__(self, other: "Moments") -> "Moments":
        return Moments(
            self.weight - other.weight, self.sx - other.sx, self.sy - other.sy,
            self.sxx - other.sxx, self.sxy - other.sxy,
        )

    def scaled(self, c: float) -> "Moments":
        return Moments(self.weight * c, self.sx * c, self.sy * c, self.sxx * c, self.sxy * c)

    @property
    def dim(self) -> int:
        return int(self.sx.shape[0])

    def solve(self, penalty: float, fit_intercept: bool = True, space: str = ""):
        """Ridge solution; a LinearModel, or a (weights, intercepts) pair if multi-output."""
        if penalty < 0:
            raise ValueError("penalty must be nonnegative")
        if self.weight <= 0:
            raise ValueError("total weight must be positive")
        if fit_intercept:
            xm = self.sx / self.weight
            ym = self.sy / self.weight
            G = self.sxx - np.outer(self.sx, xm)
            c = self.sxy - np.multiply.outer(xm, self.sy)
        else:
            xm, ym = np.zeros_like(self.sx), np.zeros_like(self.sy)
            G, c = self.sxx, self.sxy
        G = 0.5 * (G + G.T)
        w = _cholesky_solve(G + penalty * np.eye(self.dim), c, penalty)
        b = ym - xm @ w
        if np.ndim(self.sy) == 0:
            return LinearModel(w, float(b), penalty, space)
        return w, b
