"""Higher-order cumulant tensors, symmetric CP decomposition and Kruskal checks."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from ._rng import stream
from .errors import DecompositionError, RankDeficiencyError, ValidationError
from .simulate import BinnedCounts, Observation

__all__ = [
    "CumulantTensor",
    "CPFactors",
    "KruskalResult",
    "preprocess",
    "estimate_cumulant",
    "cumulant_standard_errors",
    "multilinear",
    "symmetrize",
    "cp_decompose",
    "canonicalize",
    "cp_feasible",
    "kruskal_rank",
    "kruskal_check",
    "nonzero_cumulant_scan",
    "Whitener",
    "fit_whitener",
    "whitened_cp",
]

_LETTERS = "ijkl"


def _as_series(x) -> np.ndarray:
    if isinstance(x, Observation):
        return np.asarray(x.data, dtype=float)
    if isinstance(x, BinnedCounts):
        return x.counts.astype(float)
    a = np.asarray(x, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def preprocess(x, mode: str = "difference") -> np.ndarray:
    """First difference (default), mean-centering, or nothing."""
    a = _as_series(x)
    if mode == "difference":
        return np.diff(a, axis=0)
    if mode == "center":
        return a - a.mean(axis=0)
    if mode == "none":
        return a
    raise ValidationError(f"unknown preprocessing {mode!r}")


@dataclass(frozen=True)
class CumulantTensor:
    order: int
    dim: int
    lags: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        a = np.array(self.data, dtype=float)
        if a.shape != (self.dim,) * self.order:
            raise ValidationError(f"tensor shape {a.shape} does not match order {self.order}, dim {self.dim}")
        if len(self.lags) != self.order - 1:
            raise ValidationError("need order - 1 lags")
        a.flags.writeable = False
        object.__setattr__(self, "data", a)
        object.__setattr__(self, "lags", tuple(int(v) for v in self.lags))

    @property
    def zero_lag(self) -> bool:
        return all(v == 0 for v in self.lags)

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))


def _aligned(x: np.ndarray, lags: tuple[int, ...]) -> list[np.ndarray]:
    shifts = (0,) + tuple(lags)
    span = max(shifts)
    length = x.shape[0] - span
    return [x[s:s + length] - x[s:s + length].mean(axis=0) for s in shifts]


def _kstat(modes: list[np.ndarray]) -> np.ndarray:
    d = len(modes)
    n = modes[0].shape[0]
    if d == 2:
        return np.einsum("ti,tj->ij", *modes) / (n - 1)
    if d == 3:
        return np.einsum("ti,tj,tk->ijk", *modes) * n / ((n - 1) * (n - 2))
    a, b, c, e = modes
    m4 = np.einsum("ti,tj,tk,tl->ijkl", a, b, c, e) / n
    pair = lambda u, v: (u.T @ v) / n  # noqa: E731
    pairs = (
        np.einsum("ij,kl->ijkl", pair(a, b), pair(c, e))
        + np.einsum("ik,jl->ijkl", pair(a, c), pair(b, e))
        + np.einsum("il,jk->ijkl", pair(a, e), pair(b, c))
    )
    return n * n * ((n + 1) * m4 - (n - 1) * pairs) / ((n - 1) * (n - 2) * (n - 3))


def estimate_cumulant(obs, order: int, lags: tuple[int, ...] | None = None) -> CumulantTensor:
    """Joint cumulant of (x_t, x_{t+l_1}, ..., x_{t+l_{d-1}}).

    Orders 2 and 3 use the unbiased k-statistics. Order 4 uses the
    bias-corrected fourth k-statistic
    n^2 [(n+1) m4 - (n-1) sum of three pairings] / ((n-1)(n-2)(n-3)),
    with m the centred sample moments.
    """
    if order not in (2, 3, 4):
        raise ValidationError(f"cumulant order must be 2, 3 or 4, got {order}")
    x = _as_series(obs)
    lags = tuple(lags) if lags is not None else (0,) * (order - 1)
    if len(lags) != order - 1 or any(v < 0 for v in lags):
        raise ValidationError("lags must be order - 1 nonnegative integers")
    n_dim = x.shape[1]
    if x.shape[0] - max(lags, default=0) < 50 * n_dim:
        raise ValidationError(f"series too short: need at least {50 * n_dim} aligned samples")
    return CumulantTensor(order, n_dim, lags, _kstat(_aligned(x, lags)))


def cumulant_standard_errors(obs, order: int, lags: tuple[int, ...] | None = None, batches: int = 20) -> np.ndarray:
    """Entrywise standard errors from contiguous batch estimates."""
    x = _as_series(obs)
    lags = tuple(lags) if lags is not None else (0,) * (order - 1)
    size = x.shape[0] // batches
    ests = np.stack([_kstat(_aligned(x[b * size:(b + 1) * size], lags)) for b in range(batches)])
    return ests.std(axis=0, ddof=1) / math.sqrt(batches)


def multilinear(t: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Apply ``a`` along every mode of ``t``."""
    out = np.asarray(t)
    for mode in range(out.ndim):
        out = np.moveaxis(np.tensordot(a, out, axes=([1], [mode])), 0, mode)
    return out


def symmetrize(t: np.ndarray) -> np.ndarray:
    perms = list(itertools.permutations(range(t.ndim)))
    return sum(np.transpose(t, perm) for perm in perms) / len(perms)


@dataclass(frozen=True)
class CPFactors:
    weights: np.ndarray
    factors: np.ndarray
    residual: float
    order: int

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        f = np.array(self.factors, dtype=float)
        if f.ndim != 2 or f.shape[1] != w.size:
            raise ValidationError("factors must be n x r with r weights")
        w.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "factors", f)

    @property
    def rank(self) -> int:
        return self.weights.size

    def tensor(self) -> np.ndarray:
        return _reconstruct(self.weights, self.factors, self.order)


def _reconstruct(w: np.ndarray, a: np.ndarray, d: int) -> np.ndarray:
    spec = ",".join(f"{c}r" for c in _LETTERS[:d]) + ",r->" + _LETTERS[:d]
    return np.einsum(spec, *([a] * d), w)


def _contract(t: np.ndarray, a: np.ndarray) -> np.ndarray:
    """M[:, r] = T(., a_r, ..., a_r)."""
    d = t.ndim
    spec = _LETTERS[:d] + "," + ",".join(f"{c}r" for c in _LETTERS[1:d]) + "->ir"
    return np.einsum(spec, t, *([a] * (d - 1)))


def canonicalize(cp: CPFactors) -> CPFactors:
    """Unit columns, largest-magnitude entry positive, weights by descending |w|."""
    d = cp.order
    f = np.array(cp.factors, dtype=float)
    w = np.array(cp.weights, dtype=float)
    norms = np.linalg.norm(f, axis=0)
    ok = norms > 0
    f[:, ok] /= norms[ok]
    w = np.where(ok, w * norms ** d, w)
    idx = np.argmax(np.abs(f), axis=0)
    signs = np.sign(f[idx, np.arange(f.shape[1])])
    signs[signs == 0] = 1.0
    f *= signs
    w *= signs ** d
    order = np.argsort(-np.abs(w), kind="stable")
    return CPFactors(w[order], f[:, order], cp.residual, d)


def cp_feasible(n: int, r: int, d: int) -> bool:
    """Whether a generic rank-r symmetric order-d tensor in R^n meets Kruskal's bound."""
    return r == 1 or math.ceil((2 * r + d - 1) / d) <= min(n, r)


def _weights(t: np.ndarray, a: np.ndarray) -> np.ndarray:
    d = t.ndim
    gram = (a.T @ a) ** d
    rhs = np.einsum("ir,ir->r", _contract(t, a), a)
    return np.linalg.lstsq(gram, rhs, rcond=None)[0]


def _als(t: np.ndarray, r: int, rng: np.random.Generator, tol: float, max_sweeps: int):
    n, d = t.shape[0], t.ndim
    a = rng.standard_normal((n, r))
    a /= np.linalg.norm(a, axis=0)
    for _ in range(max_sweeps):
        m = _contract(t, a)
        gram = (a.T @ a) ** (d - 1)
        b = m @ np.linalg.pinv(gram)
        norms = np.linalg.norm(b, axis=0)
        dead = norms < 1e-300
        if np.any(dead):
            b[:, dead] = rng.standard_normal((n, int(dead.sum())))
            norms = np.linalg.norm(b, axis=0)
        b /= norms
        signs = np.sign(np.einsum("ir,ir->r", a, b))
        signs[signs == 0] = 1.0
        b *= signs
        change = float(np.max(np.linalg.norm(b - a, axis=0)))
        a = b
        if change < tol:
            break
    w = _weights(t, a)
    res = np.linalg.norm(t - _reconstruct(w, a, d)) / np.linalg.norm(t)
    return float(res), w, a


def _polish(t: np.ndarray, w: np.ndarray, a: np.ndarray):
    """Levenberg-Marquardt refinement of an ALS solution (helps in swamps)."""
    n, r = a.shape
    d = t.ndim

    def resid(theta):
        return (_reconstruct(theta[:r], theta[r:].reshape(n, r), d) - t).ravel()

    sol = optimize.least_squares(resid, np.concatenate([w, a.ravel()]), method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    w2, a2 = sol.x[:r], sol.x[r:].reshape(n, r)
    norms = np.linalg.norm(a2, axis=0)
    if np.any(norms == 0):
        return None
    a2 = a2 / norms
    w2 = _weights(t, a2)
    res = np.linalg.norm(t - _reconstruct(w2, a2, d)) / np.linalg.norm(t)
    return float(res), w2, a2


def cp_decompose(
    t: CumulantTensor | np.ndarray,
    rank: int,
    restarts: int = 10,
    tol: float = 1e-9,
    max_sweeps: int = 2000,
    seed: int = 0,
    max_residual: float = 0.1,
    polish: bool = True,
    max_degeneracy: float = 10.0,
) -> CPFactors:
    """Symmetric ALS with random restarts; returns the canonicalized best fit.

    Fits whose weights cancel (sum |w| above ``max_degeneracy`` times the
    tensor norm) are ranked after all non-degenerate fits. Restarts stop
    early once a non-degenerate residual is below 1e-6. The best fit is then
    refined by Levenberg-Marquardt unless ``polish`` is False. A tensor with
    nonzero lags is symmetrized first. The zero tensor returns zero weights.
    """
    data = t.data if isinstance(t, CumulantTensor) else np.asarray(t, dtype=float)
    if isinstance(t, CumulantTensor) and not t.zero_lag:
        data = symmetrize(data)
    d = data.ndim
    n = data.shape[0]
    if d < 2 or data.shape != (n,) * d:
        raise ValidationError("cp_decompose needs a cubical tensor")
    if rank < 1 or not cp_feasible(n, rank, d):
        raise ValidationError(f"rank {rank} is not Kruskal-feasible for n={n}, order {d}")
    scale = np.linalg.norm(data)
    if scale == 0:
        eye = np.eye(n)
        return CPFactors(np.zeros(rank), eye[:, np.arange(rank) % n], 0.0, d)
    if np.linalg.norm(data - symmetrize(data)) > 1e-10 * scale:
        raise ValidationError("tensor is not symmetric")
    unit = data / scale
    def key(fit):
        return (bool(np.sum(np.abs(fit[1])) > max_degeneracy), fit[0])

    best = None
    for k in range(max(1, restarts)):
        fit = _als(unit, rank, stream(seed, "cp", k), tol, max_sweeps)
        if best is None or key(fit) < key(best):
            best = fit
        if key(best) < (False, 1e-6):
            break
    if polish and best[0] > 1e-12:
        refined = _polish(unit, best[1], best[2])
        if refined is not None and key(refined) < key(best):
            best = refined
    res, w, a = best
    if res > max_residual:
        raise DecompositionError(f"CP residual {res:.3g} exceeds {max_residual}", res)
    return canonicalize(CPFactors(w * scale, a, res, d))


@dataclass(frozen=True)
class KruskalResult:
    krank: int
    bound: int
    passed: bool
    margin: int
    certified: bool

    def __bool__(self) -> bool:
        return self.passed


def _independent(sub: np.ndarray) -> bool:
    return np.linalg.matrix_rank(sub) == sub.shape[1]


def kruskal_rank(v: np.ndarray, samples: int = 2000, seed: int = 0) -> tuple[int, bool]:
    """Kruskal rank and whether it was certified by exhaustive search.

    Exhaustive for up to 12 columns; above that, random column subsets are
    tested and the result is an upper bound.
    """
    v = np.asarray(v, dtype=float)
    n, r = v.shape
    if r > 20:
        raise ValidationError("kruskal rank limited to at most 20 columns")
    exhaustive = r <= 12
    rng = stream(seed, "kruskal")
    krank = 0
    for k in range(1, min(n, r) + 1):
        if exhaustive or math.comb(r, k) <= samples:
            subsets = itertools.combinations(range(r), k)
        else:
            subsets = (np.sort(rng.choice(r, size=k, replace=False)) for _ in range(samples))
        if all(_independent(v[:, list(s)]) for s in subsets):
            krank = k
        else:
            break
    return krank, exhaustive


def kruskal_check(factors: np.ndarray, d: int) -> KruskalResult:
    """krank(V) >= ceil((2r + d - 1) / d)."""
    v = np.asarray(factors, dtype=float)
    if v.ndim != 2 or v.shape[1] < 1:
        raise ValidationError("need an n x r factor matrix with r >= 1")
    r = v.shape[1]
    krank, certified = kruskal_rank(v)
    bound = math.ceil((2 * r + d - 1) / d)
    return KruskalResult(krank, bound, krank >= bound, krank - bound, certified)


def nonzero_cumulant_scan(obs, d_max: int = 4, threshold: float = 5.0, batches: int = 20) -> set[int]:
    """Orders whose cumulant norm exceeds ``threshold`` aggregated standard errors."""
    if not 2 <= d_max <= 4:
        raise ValidationError("d_max must be in 2..4")
    x = _as_series(obs)
    found = set()
    for d in range(2, d_max + 1):
        est = estimate_cumulant(x, d).norm()
        se = float(np.sqrt(np.sum(cumulant_standard_errors(x, d, batches=batches) ** 2)))
        if est > 0 and est > threshold * se:
            found.add(d)
    return found


@dataclass(frozen=True)
class Whitener:
    """``matrix`` (r x n) maps centred data to unit covariance on its top-r subspace."""

    matrix: np.ndarray
    variances: np.ndarray

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.pinv(self.matrix)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.matrix.T


def fit_whitener(x, rank: int | None = None, rank_tol: float = 1e-9) -> Whitener:
    """Principal-subspace whitening; ``rank`` defaults to the numerical covariance rank."""
    a = _as_series(x)
    cov = np.atleast_2d(np.cov(a, rowvar=False))
    vals, vecs = np.linalg.eigh(cov)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    if vals[0] <= 0:
        raise RankDeficiencyError("data have zero covariance")
    if rank is None:
        rank = int(np.sum(vals > rank_tol * vals[0]))
    if not 1 <= rank <= a.shape[1] or vals[rank - 1] <= rank_tol * vals[0]:
        raise RankDeficiencyError(f"covariance rank is below {rank}")
    vecs = vecs[:, :rank] * np.sign(vecs[np.argmax(np.abs(vecs[:, :rank]), axis=0), np.arange(rank)])
    return Whitener(vecs.T / np.sqrt(vals[:rank])[:, None], vals[:rank])


def whitened_cp(x, order: int, rank: int, **cp_kw) -> tuple[CPFactors, Whitener]:
    """CP of the order-d cumulant of whitened data, mapped back to data coordinates.

    Whitening makes the factors close to orthogonal, which keeps ALS out of
    swamps when the mixing is ill conditioned. Returned factors have unit
    norm in data coordinates.
    """
    a = _as_series(x)
    wh = fit_whitener(a, rank)
    cp = cp_decompose(estimate_cumulant(wh.apply(a), order), rank, **cp_kw)
    return canonicalize(CPFactors(cp.weights, wh.inverse @ cp.factors, cp.residual, order)), wh
