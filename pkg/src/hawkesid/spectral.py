"""Cross-spectral estimation, Wilson factorization and the convolution prior."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .errors import ConsistencyError, ConvergenceError, RankDeficiencyError, UnstableModelError, ValidationError
from .model import HawkesModel, discrete_kernels, discrete_transfer, inar_window, require_stable
from .simulate import BinnedCounts, Observation

__all__ = [
    "SpectralDensity",
    "SpectralFactor",
    "estimate_psd",
    "wilson_factorize",
    "recover_transfer",
    "wiener_khinchin_cov",
    "convolution_prior_params",
    "innovations",
]


def _as_series(x) -> np.ndarray:
    if isinstance(x, Observation):
        return np.asarray(x.data, dtype=float)
    if isinstance(x, BinnedCounts):
        return x.counts.astype(float)
    a = np.asarray(x, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def _hermitian(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


@dataclass(frozen=True)
class SpectralDensity:
    """S(omega_k) on the grid omega_k = 2 pi k / N (radians per bin)."""

    matrices: np.ndarray
    clip_mass: float = 0.0
    n_segments: int = 1

    def __post_init__(self):
        s = np.array(self.matrices, dtype=complex)
        if s.ndim != 3 or s.shape[1] != s.shape[2]:
            raise ValidationError("spectral matrices must have shape (N, p, p)")
        s.flags.writeable = False
        object.__setattr__(self, "matrices", s)

    @property
    def n_freq(self) -> int:
        return self.matrices.shape[0]

    @property
    def p(self) -> int:
        return self.matrices.shape[1]

    @property
    def frequencies(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.n_freq) / self.n_freq


def estimate_psd(
    obs,
    n_freq: int,
    taper: str | None = None,
    segments: int | None = 1,
    pow2: str = "reject",
) -> SpectralDensity:
    """Welch estimate from half-overlapping windows of length ``n_freq``.

    ``segments=None`` uses every half-overlapping window that fits; an
    explicit count places that many windows evenly over the series.
    ``pow2`` is "reject" (N must be a power of two) or "allow".
    """
    x = _as_series(obs)
    n = int(n_freq)
    if n < 2:
        raise ValidationError("n_freq must be >= 2")
    if pow2 == "reject" and n & (n - 1):
        raise ValidationError(f"n_freq={n} is not a power of two")
    if pow2 not in ("reject", "allow"):
        raise ValidationError(f"unknown pow2 policy {pow2!r}")
    length, p = x.shape
    if segments is None:
        if length < n:
            raise ValidationError(f"series of length {length} shorter than window {n}")
        starts = np.arange(0, length - n + 1, max(n // 2, 1))
    else:
        if segments < 1 or length < n * segments:
            raise ValidationError(f"series of length {length} too short for {segments} windows of {n}")
        starts = np.round(np.linspace(0, length - n, segments)).astype(int) if segments > 1 else np.array([0])
    if taper is None or taper == "none":
        w = np.ones(n)
    elif taper == "hann":
        w = signal.windows.hann(n, sym=False)
    else:
        raise ValidationError(f"unknown taper {taper!r}")
    xc = x - x.mean(axis=0)
    segs = np.stack([xc[s:s + n] for s in starts]) * w[None, :, None]
    half = np.fft.rfft(segs, axis=1)
    energy = float(np.sum(w * w))
    ph = np.einsum("skp,skq->kpq", half, np.conj(half)) / (len(starts) * energy)
    full = np.empty((n, p, p), dtype=complex)
    full[: ph.shape[0]] = ph
    k = np.arange(ph.shape[0], n)
    full[k] = np.conj(ph[n - k])
    full = _hermitian(full)
    clip = 0.0
    tr = np.real(np.trace(full, axis1=1, axis2=2))
    for i in range(n):
        vals, vecs = np.linalg.eigh(full[i])
        if vals[0] < -1e-12 * max(tr[i], 0.0):
            clip += float(-vals[vals < 0].sum())
            full[i] = _hermitian((vecs * np.maximum(vals, 0.0)) @ vecs.conj().T)
    return SpectralDensity(full, clip, len(starts))


@dataclass(frozen=True)
class SpectralFactor:
    """S = G Sigma G^H with G causal, minimum phase and lag-0 coefficient I.

    When built from an n > p spectrum, ``projection`` (p x n, orthonormal rows)
    maps observations to the principal subspace the factor lives in.
    """

    G: np.ndarray
    sigma: np.ndarray
    residual: float
    iterations: int
    projection: np.ndarray | None = None

    def __post_init__(self):
        for name in ("G", "sigma", "projection"):
            a = getattr(self, name)
            if a is not None:
                a = np.array(a)
                a.flags.writeable = False
                object.__setattr__(self, name, a)

    @property
    def n_freq(self) -> int:
        return self.G.shape[0]

    @property
    def p(self) -> int:
        return self.G.shape[1]

    def reconstruct(self) -> np.ndarray:
        s = self.G @ self.sigma @ np.conj(np.swapaxes(self.G, 1, 2))
        if self.projection is not None:
            s = self.projection.T @ s @ self.projection
        return s

    def impulse_response(self, lags: int | None = None) -> np.ndarray:
        h = np.fft.ifft(self.G, axis=0)
        return np.real(h[: lags if lags is not None else self.n_freq // 2])

    def observed_transfer(self) -> np.ndarray:
        """G mapped back to observation coordinates (n x p per frequency)."""
        return self.G if self.projection is None else self.projection.T @ self.G


def _plus(g: np.ndarray) -> np.ndarray:
    """Causal part on the DFT grid; lag 0 keeps its lower half so products stay triangular."""
    n = g.shape[0]
    c = np.fft.ifft(g, axis=0)
    out = np.zeros_like(c)
    c0 = c[0]
    out[0] = np.tril(c0, -1) + 0.5 * np.diag(np.diag(c0))
    out[1: n // 2] = c[1: n // 2]
    if n % 2 == 0:
        out[n // 2] = 0.5 * c[n // 2]
    else:
        out[n // 2] = c[n // 2]
    return np.fft.fft(out, axis=0)


def wilson_factorize(
    s: SpectralDensity | np.ndarray,
    tol: float = 1e-9,
    max_iter: int = 500,
    ridge: float = 1e-8,
) -> SpectralFactor:
    """Wilson's Newton-type iteration for S(omega) = psi psi^H with psi causal.

    The returned G is psi normalised by its lag-0 coefficient, so G has leading
    impulse-response coefficient I and Sigma = psi_0 psi_0^T; this representative
    is unique. ``ridge`` adds ridge * mean trace * I before factorising; the
    residual is measured against the ridged spectrum.
    """
    mats = np.array(s.matrices if isinstance(s, SpectralDensity) else s, dtype=complex)
    if mats.ndim != 3 or mats.shape[1] != mats.shape[2]:
        raise ValidationError("spectrum must have shape (N, p, p)")
    n, p, _ = mats.shape
    if not np.all(np.isfinite(mats)):
        raise ValidationError("spectrum has non-finite entries")
    mats = _hermitian(mats)
    tr = np.real(np.trace(mats, axis1=1, axis2=2))
    mats = mats + ridge * tr.mean() * np.eye(p)[None]
    tr = np.real(np.trace(mats, axis1=1, axis2=2))
    mins = np.linalg.eigvalsh(mats)[:, 0]
    if np.any(mins <= 1e-10 * tr):
        raise ValidationError("spectrum is not strictly positive definite at every frequency")
    gamma0 = np.real(np.fft.ifft(mats, axis=0)[0])
    psi = np.repeat(np.linalg.cholesky(0.5 * (gamma0 + gamma0.T)).astype(complex)[None], n, axis=0)
    eye = np.eye(p)[None]
    norm_s = np.linalg.norm(mats, axis=(1, 2))
    residual = np.inf
    for it in range(1, max_iter + 1):
        inv = np.linalg.inv(psi)
        g = inv @ mats @ np.conj(np.swapaxes(inv, 1, 2)) + eye
        psi = psi @ _plus(g)
        rec = psi @ np.conj(np.swapaxes(psi, 1, 2))
        residual = float(np.max(np.linalg.norm(rec - mats, axis=(1, 2)) / norm_s))
        if residual <= tol:
            break
    else:
        raise ConvergenceError(f"Wilson factorization did not reach tol {tol:g}", last=psi, residual=residual)
    a0 = np.real(np.fft.ifft(psi, axis=0)[0])
    g_mat = psi @ np.linalg.inv(a0)[None]
    sigma = a0 @ a0.T
    rec = g_mat @ sigma @ np.conj(np.swapaxes(g_mat, 1, 2))
    residual = float(np.max(np.linalg.norm(rec - mats, axis=(1, 2)) / norm_s))
    return SpectralFactor(g_mat, 0.5 * (sigma + sigma.T), residual, it)


def recover_transfer(
    s_obs: SpectralDensity,
    p: int | None = None,
    rank_tol: float = 1e-9,
    **wilson_kw,
) -> SpectralFactor:
    """Minimum-phase factor of an observed spectrum, projecting when n > p.

    ``p`` defaults to the numerical rank of the lag-0 covariance.
    """
    mats = s_obs.matrices
    n = mats.shape[1]
    cov = wiener_khinchin_cov(s_obs)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    if p is None:
        p = int(np.sum(vals > rank_tol * vals[0])) if vals[0] > 0 else 0
    if not 1 <= p <= n:
        raise RankDeficiencyError(f"latent dimension {p} incompatible with {n} observed channels")
    ev = np.linalg.eigvalsh(mats)
    eff = np.sum(ev > rank_tol * np.maximum(ev[:, -1:], 1e-300), axis=1)
    if np.mean(eff < p) > 0.1:
        raise RankDeficiencyError(f"effective spectral rank below {p} at {np.mean(eff < p):.0%} of frequencies")
    proj = None
    if n > p:
        proj = vecs[:, :p].T.copy()
        # deterministic sign: largest-magnitude entry of each row positive
        idx = np.argmax(np.abs(proj), axis=1)
        proj *= np.sign(proj[np.arange(p), idx])[:, None]
        mats = proj @ mats @ proj.T
    fac = wilson_factorize(mats, **wilson_kw)
    return SpectralFactor(fac.G, fac.sigma, fac.residual, fac.iterations, proj)


def innovations(obs, factor: SpectralFactor, drop: int | None = None) -> np.ndarray:
    """Whitened innovations e_t = G^{-1}(L) y_t of the (projected, centred) series."""
    x = _as_series(obs)
    y = x - x.mean(axis=0)
    if factor.projection is not None:
        y = y @ factor.projection.T
    n = factor.n_freq
    coef = np.real(np.fft.ifft(np.linalg.inv(factor.G), axis=0))[: n // 2]
    length, p = y.shape
    out = np.zeros((length, p))
    for a in range(p):
        for b in range(p):
            out[:, a] += signal.fftconvolve(y[:, b], coef[:, a, b])[:length]
    drop = n // 2 if drop is None else drop
    return out[drop:]


def wiener_khinchin_cov(s: SpectralDensity) -> np.ndarray:
    """Lag-0 covariance (1/N) sum_k S(omega_k)."""
    c = np.mean(s.matrices, axis=0)
    re, im = np.real(c), np.imag(c)
    if np.linalg.norm(im) > 1e-8 * np.linalg.norm(re):
        raise ConsistencyError(f"imaginary residue {np.linalg.norm(im):.3g} too large")
    return 0.5 * (re + re.T)


def convolution_prior_params(
    m: HawkesModel,
    delta: float,
    n_freq: int,
    innovation_cov: np.ndarray | None = None,
    window: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian prior (mean, covariance) of the INAR(delta) counts.

    H is the discrete-time transfer of the INAR recursion. With no
    ``innovation_cov`` the Poisson choice diag(mean) is used.
    """
    require_stable(m)
    w = window if window is not None else inar_window(m, delta, max_bins=max(16 * n_freq, 4096))
    kern = discrete_kernels(m, delta, w)
    a = kern.sum(axis=0)
    if np.max(np.abs(np.linalg.eigvals(a))) >= 1:
        raise UnstableModelError("discretised kernel is unstable at this delta")
    omegas = 2 * np.pi * np.arange(n_freq) / n_freq
    h = discrete_transfer(kern, omegas)
    mean = np.real(h[0] @ m.baseline) * delta
    sig = np.diag(mean) if innovation_cov is None else np.asarray(innovation_cov, dtype=float)
    cov = np.real(np.mean(h @ sig @ np.conj(np.swapaxes(h, 1, 2)), axis=0))
    return mean, 0.5 * (cov + cov.T)
