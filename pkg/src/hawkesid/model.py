"""Parametric Hawkes models: kernels, stability and frequency-domain transfer."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import ClassVar, Union

import numpy as np
from scipy import integrate, optimize
from scipy.sparse.csgraph import connected_components

from .errors import (
    ConvergenceError,
    DivergenceError,
    SingularityError,
    UnstableModelError,
    ValidationError,
)

__all__ = [
    "Exponential",
    "PowerLaw",
    "Rectangular",
    "Zero",
    "KernelSpec",
    "HawkesModel",
    "StabilityReport",
    "kernel_eval",
    "kernel_l1_norm",
    "kernel_fourier",
    "check_stability",
    "transfer_matrix",
    "kernel_from_dict",
    "inar_window",
    "discrete_kernels",
    "discrete_transfer",
    "DEFAULT_POWERLAW_TMAX",
]

DEFAULT_POWERLAW_TMAX = 50.0
_QUAD_RTOL = 1e-10


def _finite_nonneg(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value) or value < 0:
        raise ValidationError(f"{name} must be finite and >= 0, got {value}")
    return value


@dataclass(frozen=True, slots=True)
class Exponential:
    alpha: float
    beta: float
    kind: ClassVar[str] = "exponential"

    def __post_init__(self):
        _finite_nonneg("alpha", self.alpha)
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ValidationError(f"beta must be > 0, got {self.beta}")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = self.alpha * np.exp(-self.beta * np.where(t >= 0, t, 0.0))
        return np.where(t >= 0, out, 0.0)

    def sup_after(self, lag: float) -> float:
        """sup of the kernel over [lag, inf)."""
        return float(self(max(lag, 0.0)))

    def params(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta}

    def tail_time(self, mass: float) -> float:
        ratio = self.alpha / (self.beta * mass)
        return max(0.0, math.log(ratio) / self.beta) if ratio > 1 else 0.0


@dataclass(frozen=True, slots=True)
class PowerLaw:
    """alpha / (t + c)**beta on [0, t_max]; t_max is mandatory when beta <= 1."""

    alpha: float
    beta: float
    c: float = 1.0
    t_max: float | None = None
    kind: ClassVar[str] = "powerlaw"

    def __post_init__(self):
        _finite_nonneg("alpha", self.alpha)
        if not math.isfinite(self.beta):
            raise ValidationError("beta must be finite")
        if not (math.isfinite(self.c) and self.c > 0):
            raise ValidationError(f"c must be > 0, got {self.c}")
        if self.t_max is None:
            if self.beta <= 1:
                object.__setattr__(self, "t_max", DEFAULT_POWERLAW_TMAX)
        elif not (self.t_max > 0):
            raise ValidationError(f"t_max must be > 0, got {self.t_max}")
        elif math.isinf(self.t_max):
            if self.beta <= 1:
                raise ValidationError("beta <= 1 requires a finite t_max")
            object.__setattr__(self, "t_max", None)

    @property
    def horizon(self) -> float:
        return math.inf if self.t_max is None else float(self.t_max)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        inside = (t >= 0) & (t <= self.horizon)
        safe = np.where(inside, t, 0.0)
        return np.where(inside, self.alpha * (safe + self.c) ** (-self.beta), 0.0)

    def sup_after(self, lag: float) -> float:
        lag = max(lag, 0.0)
        if lag > self.horizon:
            return 0.0
        if self.beta >= 0:
            return float(self(lag))
        return float(self(self.horizon))

    def params(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "c": self.c, "t_max": self.t_max}

    def tail_mass(self, t: float) -> float:
        """Closed-form L1 mass of the kernel beyond t."""
        if t >= self.horizon:
            return 0.0
        return _powerlaw_primitive(self, self.horizon) - _powerlaw_primitive(self, t)

    def tail_time(self, mass: float) -> float:
        if self.alpha == 0:
            return 0.0
        if self.tail_mass(0.0) <= mass:
            return 0.0
        hi = 1.0
        while self.tail_mass(hi) > mass:
            hi *= 2.0
            if hi > 1e12:
                return math.inf
        return float(optimize.brentq(lambda s: self.tail_mass(s) - mass, 0.0, hi, xtol=1e-9))


def _powerlaw_primitive(k: PowerLaw, t: float) -> float:
    # antiderivative of alpha (s + c)^-beta evaluated at t (inf allowed when beta > 1)
    if math.isinf(t):
        return 0.0 if k.beta > 1 else math.inf
    if k.beta == 1:
        return k.alpha * math.log(t + k.c)
    return k.alpha * (t + k.c) ** (1 - k.beta) / (1 - k.beta)


@dataclass(frozen=True, slots=True)
class Rectangular:
    height: float
    start: float
    end: float
    kind: ClassVar[str] = "rectangular"

    def __post_init__(self):
        _finite_nonneg("height", self.height)
        if not (0 <= self.start < self.end) or not math.isfinite(self.end):
            raise ValidationError(f"support must satisfy 0 <= start < end, got [{self.start}, {self.end}]")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.where((t >= self.start) & (t <= self.end), self.height, 0.0)

    def sup_after(self, lag: float) -> float:
        return self.height if lag <= self.end else 0.0

    def params(self) -> dict:
        return {"height": self.height, "start": self.start, "end": self.end}

    def tail_time(self, mass: float) -> float:
        return self.end if self.height > 0 else 0.0


@dataclass(frozen=True, slots=True)
class Zero:
    kind: ClassVar[str] = "zero"

    def __call__(self, t):
        return np.zeros_like(np.asarray(t, dtype=float))

    def sup_after(self, lag: float) -> float:
        return 0.0

    def params(self) -> dict:
        return {}

    def tail_time(self, mass: float) -> float:
        return 0.0


KernelSpec = Union[Exponential, PowerLaw, Rectangular, Zero]
_KINDS = {cls.kind: cls for cls in (Exponential, PowerLaw, Rectangular, Zero)}


def kernel_from_dict(d: dict) -> KernelSpec:
    kind = d.get("kind")
    if kind not in _KINDS:
        raise ValidationError(f"unknown kernel kind {kind!r}")
    params = dict(d.get("params", {}))
    try:
        return _KINDS[kind](**params)
    except TypeError as exc:
        raise ValidationError(f"bad parameters for {kind} kernel: {exc}") from None


def kernel_to_dict(k: KernelSpec) -> dict:
    return {"kind": k.kind, "params": k.params()}


def kernel_eval(k: KernelSpec, t):
    """Evaluate the kernel; exactly zero for negative lags."""
    out = k(t)
    return float(out) if np.ndim(out) == 0 else out


def kernel_l1_norm(k: KernelSpec, t_max: float = math.inf) -> float:
    """Integral of the kernel over [0, t_max].

    Closed forms are used for exponential and rectangular kernels; power laws
    go through adaptive quadrature at relative tolerance 1e-10.
    """
    if not t_max > 0:
        raise ValidationError("t_max must be > 0")
    if isinstance(k, Zero):
        return 0.0
    if isinstance(k, Exponential):
        if math.isinf(t_max):
            return k.alpha / k.beta
        return k.alpha / k.beta * -math.expm1(-k.beta * t_max)
    if isinstance(k, Rectangular):
        lo, hi = k.start, min(k.end, t_max)
        return k.height * max(0.0, hi - lo)
    upper = min(t_max, k.horizon)
    if math.isinf(upper) and k.beta <= 1:
        raise DivergenceError("power-law integral diverges for beta <= 1 without truncation")
    if k.alpha == 0:
        return 0.0
    return _quad(lambda s: k.alpha * (s + k.c) ** (-k.beta), upper)


def _quad(f, upper: float, weight: str | None = None, omega: float = 0.0) -> float:
    if weight is None:
        # split at a few decades so the algebraic tail is resolved
        points = [0.0] + [b for b in (1.0, 10.0, 100.0, 1000.0) if b < upper] + [upper]
        total = 0.0
        for a, b in zip(points[:-1], points[1:]):
            val, _ = integrate.quad(f, a, b, epsabs=0.0, epsrel=_QUAD_RTOL, limit=500)
            total += val
        return total
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, _ = integrate.quad(f, 0.0, upper, weight=weight, wvar=omega, epsabs=1e-13, epsrel=_QUAD_RTOL, limit=2000)
    return val


def kernel_fourier(k: KernelSpec, omega: float) -> complex:
    """phi_hat(omega) = integral of phi(t) exp(-i omega t) over t >= 0."""
    omega = float(omega)
    if not math.isfinite(omega):
        raise ValidationError("omega must be finite")
    if isinstance(k, Zero):
        return 0j
    if isinstance(k, Exponential):
        return k.alpha / complex(k.beta, omega)
    if isinstance(k, Rectangular):
        if omega == 0:
            return complex(k.height * (k.end - k.start))
        # integral of h e^{-iwt} over [a, b] = h (e^{-iwa} - e^{-iwb}) / (iw)
        a, b = k.start, k.end
        return k.height * (np.exp(-1j * omega * a) - np.exp(-1j * omega * b)) / (1j * omega)
    if omega == 0:
        return complex(kernel_l1_norm(k))
    upper = k.horizon
    f = lambda s: k.alpha * (s + k.c) ** (-k.beta)  # noqa: E731
    w = abs(omega)
    re = _quad(f, upper, "cos", w)
    im = -_quad(f, upper, "sin", w)
    return complex(re, im if omega > 0 else -im)


@dataclass(frozen=True)
class HawkesModel:
    """Baseline vector and p x p kernel grid; kernels[i][j] is the influence of j on i."""

    baseline: np.ndarray
    kernels: tuple[tuple[KernelSpec, ...], ...]
    p: int = field(init=False)

    def __post_init__(self):
        u = np.array(self.baseline, dtype=float).reshape(-1)
        if u.size == 0 or not np.all(np.isfinite(u)) or np.any(u < 0):
            raise ValidationError("baseline entries must be finite and >= 0")
        if not np.any(u > 0):
            raise ValidationError("at least one baseline entry must be > 0")
        u.flags.writeable = False
        p = u.size
        rows = tuple(tuple(row) for row in self.kernels)
        if len(rows) != p or any(len(r) != p for r in rows):
            raise ValidationError(f"kernel grid must be {p}x{p}")
        for row in rows:
            for k in row:
                if not isinstance(k, (Exponential, PowerLaw, Rectangular, Zero)):
                    raise ValidationError(f"not a kernel spec: {k!r}")
        object.__setattr__(self, "baseline", u)
        object.__setattr__(self, "kernels", rows)
        object.__setattr__(self, "p", p)

    @classmethod
    def zero(cls, baseline) -> "HawkesModel":
        p = len(np.atleast_1d(baseline))
        return cls(baseline, tuple(tuple(Zero() for _ in range(p)) for _ in range(p)))

    @classmethod
    def exponential(cls, baseline, alpha, beta) -> "HawkesModel":
        alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
        beta = np.broadcast_to(np.asarray(beta, dtype=float), alpha.shape)
        grid = tuple(
            tuple(Zero() if alpha[i, j] == 0 else Exponential(alpha[i, j], beta[i, j]) for j in range(alpha.shape[1]))
            for i in range(alpha.shape[0])
        )
        return cls(np.atleast_1d(baseline), grid)

    def l1_matrix(self) -> np.ndarray:
        return np.array([[kernel_l1_norm(k) for k in row] for row in self.kernels])

    def kernel_matrix(self, t: float) -> np.ndarray:
        """Phi(t) as a p x p matrix."""
        return np.array([[float(k(t)) for k in row] for row in self.kernels])

    def fourier_matrix(self, omega: float) -> np.ndarray:
        return np.array([[kernel_fourier(k, omega) for k in row] for row in self.kernels])

    def all_exponential(self) -> bool:
        return all(isinstance(k, (Exponential, Zero)) for row in self.kernels for k in row)

    def replace_kernel(self, i: int, j: int, kernel: KernelSpec) -> "HawkesModel":
        grid = [list(r) for r in self.kernels]
        grid[i][j] = kernel
        return HawkesModel(self.baseline.copy(), tuple(tuple(r) for r in grid))

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "baseline": [float(x) for x in self.baseline],
            "kernels": [[kernel_to_dict(k) for k in row] for row in self.kernels],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HawkesModel":
        try:
            p = int(d["p"])
            baseline = d["baseline"]
            grid = tuple(tuple(kernel_from_dict(k) for k in row) for row in d["kernels"])
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed model document: {exc}") from None
        m = cls(baseline, grid)
        if m.p != p:
            raise ValidationError(f"declared p={p} but baseline has {m.p} entries")
        return m


@dataclass(frozen=True)
class StabilityReport:
    l1_norm_matrix: np.ndarray
    spectral_radius: float
    stationary_intensity: np.ndarray | None
    stable: bool


def _perron_root(g: np.ndarray, tol: float, max_iter: int) -> float:
    """Power iteration on I + G restricted to each strongly connected block."""
    n_comp, labels = connected_components(g > 0, directed=True, connection="strong")
    best = 0.0
    for c in range(n_comp):
        idx = np.flatnonzero(labels == c)
        block = g[np.ix_(idx, idx)]
        if not np.any(block > 0):
            continue
        shifted = block + np.eye(idx.size)
        x = np.full(idx.size, 1.0 / math.sqrt(idx.size))
        lam = 0.0
        for _ in range(max_iter):
            y = shifted @ x
            new = float(np.linalg.norm(y))
            x = y / new
            if abs(new - lam) <= tol * max(1.0, new):
                lam = new
                break
            lam = new
        else:
            raise ConvergenceError("power iteration did not converge", last=x, residual=abs(new - lam))
        best = max(best, lam - 1.0)
    return max(best, 0.0)


def check_stability(m: HawkesModel, tol: float = 1e-12, max_iter: int = 10_000) -> StabilityReport:
    g = m.l1_matrix()
    g.flags.writeable = False
    rho = _perron_root(g, tol, max_iter)
    stable = rho < 1.0
    lam = None
    if stable:
        lam = np.linalg.solve(np.eye(m.p) - g, m.baseline)
        lam.flags.writeable = False
    return StabilityReport(g, rho, lam, stable)


def require_stable(m: HawkesModel) -> StabilityReport:
    rep = check_stability(m)
    if not rep.stable:
        raise UnstableModelError(f"model is unstable (spectral radius {rep.spectral_radius:.6g} >= 1)", rep)
    return rep


def transfer_matrix(m: HawkesModel, omega) -> np.ndarray:
    """H(omega) = (I - Phi_hat(omega))^{-1}; vectorised over an array of omegas."""
    require_stable(m)
    omegas = np.atleast_1d(np.asarray(omega, dtype=float))
    out = np.empty((omegas.size, m.p, m.p), dtype=complex)
    eye = np.eye(m.p)
    for n, w in enumerate(omegas):
        a = eye - m.fourier_matrix(w)
        if np.linalg.cond(a) > 1e12:
            raise SingularityError(f"I - Phi(omega) is numerically singular at omega={w}")
        out[n] = np.linalg.inv(a)
    return out[0] if np.ndim(omega) == 0 else out


def inar_window(m: HawkesModel, delta: float, tail: float = 1e-6, max_bins: int | None = None) -> int:
    """History length in bins beyond which every kernel has L1 mass below ``tail``."""
    t = max(k.tail_time(tail) for row in m.kernels for k in row)
    if math.isinf(t):
        if max_bins is None:
            raise DivergenceError("kernel tail mass does not fall below the truncation level")
        return max_bins
    w = max(1, int(math.ceil(t / delta)))
    return w if max_bins is None else min(w, max_bins)


def discrete_kernels(m: HawkesModel, delta: float, window: int) -> np.ndarray:
    """Array A with A[tau - 1] = Phi(tau * delta) * delta for tau = 1..window."""
    taus = np.arange(1, window + 1) * delta
    out = np.empty((window, m.p, m.p))
    for i, row in enumerate(m.kernels):
        for j, k in enumerate(row):
            out[:, i, j] = k(taus) * delta
    return out


def discrete_transfer(kernels: np.ndarray, omegas) -> np.ndarray:
    """(I - sum_tau A_tau e^{-i omega tau})^{-1} for each omega (rad per bin)."""
    omegas = np.atleast_1d(np.asarray(omegas, dtype=float))
    taus = np.arange(1, kernels.shape[0] + 1)
    phase = np.exp(-1j * np.outer(omegas, taus))
    phi = np.einsum("wt,tij->wij", phase, kernels)
    p = kernels.shape[1]
    return np.linalg.inv(np.eye(p)[None] - phi)
