"""Event simulation (Ogata thinning), INAR(delta) sampling, binning and mixing."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Union

import numba
import numpy as np

from ._rng import stream, substreams
from .errors import CapViolationError, ExplosionError, HawkesIdError, ValidationError
from .model import Exponential, HawkesModel, PowerLaw, Rectangular, discrete_kernels, inar_window, require_stable

__all__ = [
    "EventSequence",
    "BinnedCounts",
    "MixingMap",
    "Observation",
    "Softplus",
    "MLPIntensity",
    "PoissonNoise",
    "GaussianRounded",
    "MixtureNoise",
    "simulate",
    "simulate_nonlinear",
    "bin_events",
    "simulate_inar",
    "mix",
    "make_generic_linear",
    "make_mlp_mixing",
]


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class EventSequence:
    """Per-process strictly increasing event times on [0, horizon)."""

    horizon: float
    events: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValidationError("horizon must be > 0")
        evs = []
        for ev in self.events:
            a = np.array(ev, dtype=float).reshape(-1)
            if a.size and (a[0] < 0 or a[-1] >= self.horizon or np.any(np.diff(a) <= 0)):
                raise ValidationError("event times must be strictly increasing within [0, horizon)")
            evs.append(_readonly(a))
        object.__setattr__(self, "events", tuple(evs))

    @property
    def p(self) -> int:
        return len(self.events)

    def counts(self) -> np.ndarray:
        return np.array([ev.size for ev in self.events])

    def pooled(self) -> np.ndarray:
        return np.sort(np.concatenate(self.events)) if self.events else np.empty(0)


@dataclass(frozen=True)
class BinnedCounts:
    delta: float
    counts: np.ndarray
    clipped: int = 0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValidationError("delta must be > 0")
        c = np.array(self.counts, dtype=np.int64)
        if c.ndim != 2 or np.any(c < 0):
            raise ValidationError("counts must be a nonnegative integer matrix")
        object.__setattr__(self, "counts", _readonly(c))

    @property
    def p(self) -> int:
        return self.counts.shape[1]

    @property
    def n_bins(self) -> int:
        return self.counts.shape[0]


@dataclass(frozen=True)
class Observation:
    delta: float
    data: np.ndarray

    def __post_init__(self):
        d = np.array(self.data, dtype=float)
        if d.ndim != 2:
            raise ValidationError("observation data must be a matrix")
        object.__setattr__(self, "data", _readonly(d))

    @property
    def n(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class MixingMap:
    """Linear map (one n x p matrix) or leaky-ReLU MLP (orthonormal-column layers).

    For the MLP the first layer may be n x p with orthonormal columns; later
    layers are n x n orthogonal.
    """

    kind: str
    matrices: tuple[np.ndarray, ...]
    slope: float = 0.2
    input_dim: int = field(init=False)
    output_dim: int = field(init=False)

    def __post_init__(self):
        mats = tuple(_readonly(np.array(a, dtype=float)) for a in self.matrices)
        if not mats or any(a.ndim != 2 for a in mats):
            raise ValidationError("mixing needs at least one matrix")
        if self.kind == "linear":
            if len(mats) != 1:
                raise ValidationError("linear mixing takes exactly one matrix")
            s = np.linalg.svd(mats[0], compute_uv=False)
            if s[0] == 0 or s[-1] / s[0] < 1e-8:
                raise ValidationError("linear mixing matrix is rank deficient")
        elif self.kind == "mlp":
            for a, b in zip(mats[:-1], mats[1:]):
                if b.shape[1] != a.shape[0]:
                    raise ValidationError("MLP layer shapes do not chain")
            for a in mats:
                if a.shape[0] < a.shape[1] or not np.allclose(a.T @ a, np.eye(a.shape[1]), atol=1e-10, rtol=0):
                    raise ValidationError("MLP layers must have orthonormal columns")
        else:
            raise ValidationError(f"unknown mixing kind {self.kind!r}")
        object.__setattr__(self, "matrices", mats)
        object.__setattr__(self, "input_dim", mats[0].shape[1])
        object.__setattr__(self, "output_dim", mats[-1].shape[0])

    @classmethod
    def linear(cls, f) -> "MixingMap":
        return cls("linear", (f,))

    def apply(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.kind == "linear":
            return z @ self.matrices[0].T
        for a in self.matrices:
            z = np.where(z >= 0, z, self.slope * z) @ a.T
        return z

    def to_dict(self) -> dict:
        return {"kind": self.kind, "matrices": [a.tolist() for a in self.matrices], "slope": self.slope}

    @classmethod
    def from_dict(cls, d: dict) -> "MixingMap":
        try:
            return cls(d["kind"], tuple(np.array(m, dtype=float) for m in d["matrices"]), float(d.get("slope", 0.2)))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed mixing document: {exc}") from None


# ---------------------------------------------------------------- excitation state


class _ExpState:
    """Exact recursive excitation for exponential kernels."""

    def __init__(self, m: HawkesModel):
        p = m.p
        self.alpha = np.zeros((p, p))
        self.beta = np.ones((p, p))
        for i, row in enumerate(m.kernels):
            for j, k in enumerate(row):
                if isinstance(k, Exponential):
                    self.alpha[i, j], self.beta[i, j] = k.alpha, k.beta
        self.s = np.zeros((p, p))
        self.t = 0.0

    def advance(self, t: float) -> None:
        self.s *= np.exp(-self.beta * (t - self.t))
        self.t = t

    def excitation(self) -> np.ndarray:
        return self.s.sum(axis=1)

    def bound(self, u: np.ndarray) -> float:
        return float(u.sum() + self.s.sum())

    def add_event(self, j: int) -> None:
        self.s[:, j] += self.alpha[:, j]


def _sup_after(k, lags: np.ndarray) -> np.ndarray:
    if isinstance(k, Rectangular):
        return np.where(lags <= k.end, k.height, 0.0)
    if isinstance(k, PowerLaw) and k.beta < 0:
        return np.array([k.sup_after(x) for x in lags])
    return k(lags)


class _WindowState:
    """Excitation from a windowed event history, any kernel family."""

    def __init__(self, m: HawkesModel, tail: float = 1e-6):
        self.m = m
        p = m.p
        self.support = np.array([max(m.kernels[i][j].tail_time(tail) for i in range(p)) for j in range(p)])
        self.hist: list[list[float]] = [[] for _ in range(p)]
        self.start = [0] * p
        self.t = 0.0

    def _lags(self, j: int) -> np.ndarray:
        h = self.hist[j]
        while self.start[j] < len(h) and self.t - h[self.start[j]] > self.support[j]:
            self.start[j] += 1
        return self.t - np.asarray(h[self.start[j]:])

    def advance(self, t: float) -> None:
        self.t = t

    def excitation(self) -> np.ndarray:
        p = self.m.p
        out = np.zeros(p)
        for j in range(p):
            lags = self._lags(j)
            if lags.size:
                for i in range(p):
                    out[i] += float(self.m.kernels[i][j](lags).sum())
        return out

    def bound(self, u: np.ndarray) -> float:
        total = float(u.sum())
        p = self.m.p
        for j in range(p):
            lags = self._lags(j)
            if lags.size:
                for i in range(p):
                    total += float(_sup_after(self.m.kernels[i][j], lags).sum())
        return total

    def add_event(self, j: int) -> None:
        self.hist[j].append(self.t)


def _make_state(m: HawkesModel):
    return _ExpState(m) if m.all_exponential() else _WindowState(m)


class _Draws:
    """Buffered exponential/uniform draws from one Philox stream."""

    def __init__(self, rng: np.random.Generator, block: int = 4096):
        self.rng, self.block = rng, block
        self._refill()

    def _refill(self):
        self.e = self.rng.standard_exponential(self.block)
        self.v = self.rng.random((self.block, 2))
        self.k = 0

    def next(self):
        if self.k == self.block:
            self._refill()
        k = self.k
        self.k += 1
        return self.e[k], self.v[k, 0], self.v[k, 1]


def _pick(weights: np.ndarray, total: float, v: float) -> int:
    c = np.cumsum(weights)
    return min(int(np.searchsorted(c, v * total, side="right")), weights.size - 1)


def simulate(m: HawkesModel, horizon: float, seed: int, explosion_factor: float = 1e6) -> EventSequence:
    """Ogata thinning; deterministic for a given seed."""
    rep = require_stable(m)
    if not horizon > 0:
        raise ValidationError("horizon must be > 0")
    guard = explosion_factor * float(rep.stationary_intensity.sum())
    u = m.baseline
    state = _make_state(m)
    draws = _Draws(stream(seed, "thinning"))
    events: list[list[float]] = [[] for _ in range(m.p)]
    t = 0.0
    bound = state.bound(u)
    while True:
        e, v_acc, v_pick = draws.next()
        t += e / bound
        if t >= horizon:
            break
        state.advance(t)
        lam = u + state.excitation()
        total = float(lam.sum())
        if v_acc * bound <= total:
            i = _pick(lam, total, v_pick)
            events[i].append(t)
            state.add_event(i)
        bound = state.bound(u)
        if bound > guard:
            raise ExplosionError(f"intensity bound {bound:.3g} exceeded explosion guard at t={t:.6g}", t)
    return EventSequence(horizon, tuple(np.array(ev) for ev in events))


@dataclass(frozen=True)
class Softplus:
    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class MLPIntensity:
    """softplus(W2 relu(W1 x + b1) + b2)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = np.maximum(self.w1 @ x + self.b1, 0.0)
        return np.logaddexp(0.0, self.w2 @ h + self.b2)


def simulate_nonlinear(m: HawkesModel, link, horizon: float, seed: int, lam_max: float) -> EventSequence:
    """Thinning against the constant per-process cap ``lam_max`` on link(u + Phi * dN).

    The cap is checked at every proposal and right after every accepted event.
    """
    if not lam_max > 0:
        raise ValidationError("lam_max must be > 0")
    if not horizon > 0:
        raise ValidationError("horizon must be > 0")
    u = m.baseline
    state = _make_state(m)
    draws = _Draws(stream(seed, "thinning-nonlinear"))
    events: list[list[float]] = [[] for _ in range(m.p)]
    bound = lam_max * m.p
    t = 0.0

    def intensity(at: float) -> np.ndarray:
        lam = np.asarray(link(u + state.excitation()), dtype=float)
        if np.any(lam <= 0) or not np.all(np.isfinite(lam)):
            raise ValidationError(f"link output must be strictly positive (t={at:.6g})")
        if np.any(lam > lam_max):
            raise CapViolationError(f"linked intensity {lam.max():.6g} exceeds cap {lam_max} at t={at:.9f}", at)
        return lam

    intensity(0.0)
    while True:
        e, v_acc, v_pick = draws.next()
        t += e / bound
        if t >= horizon:
            break
        state.advance(t)
        lam = intensity(t)
        total = float(lam.sum())
        if v_acc * bound <= total:
            i = _pick(lam, total, v_pick)
            events[i].append(t)
            state.add_event(i)
            intensity(t)
    return EventSequence(horizon, tuple(np.array(ev) for ev in events))


def _n_bins(horizon: float, delta: float) -> int:
    return max(1, int(math.ceil(horizon / delta - 1e-9)))


def bin_events(e: EventSequence, delta: float) -> BinnedCounts:
    """counts[k, i] = number of events of process i in [k delta, (k+1) delta)."""
    if not delta > 0:
        raise ValidationError("delta must be > 0")
    nb = _n_bins(e.horizon, delta)
    counts = np.zeros((nb, e.p), dtype=np.int64)
    for i, ev in enumerate(e.events):
        idx = np.minimum(np.floor(ev / delta + 1e-9).astype(np.int64), nb - 1)
        counts[:, i] = np.bincount(idx, minlength=nb)
    return BinnedCounts(delta, counts)


# ---------------------------------------------------------------- INAR(delta)


@dataclass(frozen=True)
class PoissonNoise:
    pass


@dataclass(frozen=True)
class GaussianRounded:
    sigma: float

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValidationError("sigma must be >= 0")


@dataclass(frozen=True)
class MixtureNoise:
    """Two-component Gaussian mixture added to the mean, then rounded and clipped."""

    weights: tuple[float, float]
    means: tuple[float, float]
    sds: tuple[float, float]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (2,) or np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=1e-9):
            raise ValidationError("mixture weights must be two nonnegative numbers summing to 1")
        if len(self.means) != 2 or len(self.sds) != 2 or min(self.sds) < 0:
            raise ValidationError("mixture needs two means and two nonnegative sds")


Noise = Union[PoissonNoise, GaussianRounded, MixtureNoise]


@numba.njit(cache=True)
def _poisson_inv(mu, v):
    k = 0
    pmf = math.exp(-mu)
    cdf = pmf
    while v > cdf and pmf > 0.0:
        k += 1
        pmf *= mu / k
        cdf += pmf
    return k


@numba.njit(cache=True)
def _draw(mean, kind, v, g, c, mix):
    # kind 0 Poisson, 1 rounded Gaussian, 2 rounded mixture; returns (count, clipped)
    if kind == 0:
        return _poisson_inv(mean, v), 0
    if kind == 1:
        x = mean + mix[0] * g
    else:
        comp = 0 if c < mix[0] else 1
        x = mean + mix[2 + comp] + mix[4 + comp] * g
    r = np.round(x)
    if r < 0:
        return 0, 1
    return np.int64(r), 0


@numba.njit(cache=True)
def _inar_exp(n_bins, u_delta, a_delta, q, kind, v, g, c, mix):
    p = u_delta.size
    z = np.zeros((n_bins, p), dtype=np.int64)
    s = np.zeros((p, p))
    clipped = 0
    peak = 0.0
    for k in range(n_bins):
        if k > 0:
            for i in range(p):
                for j in range(p):
                    s[i, j] = q[i, j] * (s[i, j] + a_delta[i, j] * z[k - 1, j])
        for i in range(p):
            mean = u_delta[i]
            for j in range(p):
                mean += s[i, j]
            if mean < 0.0:
                mean = 0.0
                clipped += 1
            if mean > peak:
                peak = mean
            z[k, i], cl = _draw(mean, kind, v[k, i], g[k, i], c[k, i], mix)
            clipped += cl
    return z, clipped, peak


@numba.njit(cache=True)
def _inar_window(n_bins, u_delta, kern, kind, v, g, c, mix):
    p = u_delta.size
    w = kern.shape[0]
    z = np.zeros((n_bins, p), dtype=np.int64)
    clipped = 0
    peak = 0.0
    for k in range(n_bins):
        top = min(w, k)
        for i in range(p):
            mean = u_delta[i]
            for tau in range(1, top + 1):
                for j in range(p):
                    zz = z[k - tau, j]
                    if zz != 0:
                        mean += kern[tau - 1, i, j] * zz
            if mean < 0.0:
                mean = 0.0
                clipped += 1
            if mean > peak:
                peak = mean
            z[k, i], cl = _draw(mean, kind, v[k, i], g[k, i], c[k, i], mix)
            clipped += cl
    return z, clipped, peak


def simulate_inar(
    m: HawkesModel,
    delta: float,
    horizon: float,
    noise: Noise = PoissonNoise(),
    seed: int = 0,
    window: int | None = None,
) -> BinnedCounts:
    """Sample Z_k with mean delta * (u + sum_tau Phi(tau delta) Z_{k - tau}).

    Exponential kernels use the exact infinite-memory recursion; other kernels
    use a history window where the remaining L1 mass drops below 1e-6 (capped
    at the series length).  A warning is issued when a bin mean exceeds 1.
    """
    require_stable(m)
    if not (delta > 0 and horizon > 0):
        raise ValidationError("delta and horizon must be > 0")
    nb = _n_bins(horizon, delta)
    p = m.p
    rngs = substreams(seed, p, "inar")
    v = np.empty((nb, p))
    g = np.zeros((nb, p))
    c = np.zeros((nb, p))
    for i, r in enumerate(rngs):
        v[:, i] = r.random(nb)
        if not isinstance(noise, PoissonNoise):
            g[:, i] = r.standard_normal(nb)
        if isinstance(noise, MixtureNoise):
            c[:, i] = r.random(nb)
    if isinstance(noise, PoissonNoise):
        kind, mix = 0, np.zeros(6)
    elif isinstance(noise, GaussianRounded):
        kind, mix = 1, np.array([noise.sigma, 0, 0, 0, 0, 0], dtype=float)
    elif isinstance(noise, MixtureNoise):
        kind = 2
        mix = np.array([noise.weights[0], noise.weights[1], *noise.means, *noise.sds], dtype=float)
    else:
        raise ValidationError(f"unknown noise family {noise!r}")
    u_delta = m.baseline * delta
    if m.all_exponential() and window is None:
        a = np.zeros((p, p))
        q = np.ones((p, p))
        for i, row in enumerate(m.kernels):
            for j, k in enumerate(row):
                if isinstance(k, Exponential):
                    q[i, j] = math.exp(-k.beta * delta)
                    a[i, j] = k.alpha * delta
        z, clipped, peak = _inar_exp(nb, u_delta, a, q, kind, v, g, c, mix)
    else:
        w = window if window is not None else inar_window(m, delta, max_bins=nb)
        kern = discrete_kernels(m, delta, w)
        z, clipped, peak = _inar_window(nb, u_delta, kern, kind, v, g, c, mix)
    if peak > 1.0:
        warnings.warn(f"bin mean reached {peak:.3g} > 1; delta may be too coarse", RuntimeWarning, stacklevel=2)
    return BinnedCounts(delta, z, int(clipped))


# ---------------------------------------------------------------- mixing


def mix(b: BinnedCounts, mapping: MixingMap) -> Observation:
    if mapping.input_dim != b.p:
        raise ValidationError(f"mixing expects {mapping.input_dim} inputs, counts have {b.p}")
    return Observation(b.delta, mapping.apply(b.counts.astype(float)))


def make_generic_linear(n: int, p: int, seed: int, attempts: int = 8) -> MixingMap:
    """iid standard normal n x p matrix, regenerated until well conditioned."""
    if n < 1 or p < 1:
        raise ValidationError("n and p must be >= 1")
    rng = stream(seed, "mixing-linear")
    for _ in range(attempts):
        f = rng.standard_normal((n, p))
        s = np.linalg.svd(f, compute_uv=False)
        if s[-1] / s[0] >= 1e-8:
            return MixingMap.linear(f)
    raise HawkesIdError("could not generate a full-rank mixing matrix")


def _orthonormal(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, k)))
    q = q * np.sign(np.diag(r))
    # re-orthonormalise to machine precision
    q, r = np.linalg.qr(q)
    return q * np.sign(np.diag(r))


def make_mlp_mixing(n: int, p: int, seed: int, layers: int = 2, slope: float = 0.2) -> MixingMap:
    """Leaky-ReLU MLP whose first layer is n x p with orthonormal columns."""
    if n < p or layers < 1:
        raise ValidationError("MLP mixing needs n >= p and at least one layer")
    rng = stream(seed, "mixing-mlp")
    mats = [_orthonormal(rng, n, p)] + [_orthonormal(rng, n, n) for _ in range(layers - 1)]
    return MixingMap("mlp", tuple(mats), slope)


def observation_counts(b: BinnedCounts) -> Observation:
    return Observation(b.delta, b.counts.astype(float))

