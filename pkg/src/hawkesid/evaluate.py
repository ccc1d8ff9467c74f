"""Recovery scores (MCC, kernel error) and the delta -> 0 convergence diagnostics.

Latents scored here come from spectral and cumulant inversion, not from a
trained encoder, so MCC values are comparable to encoder-based scores in kind
only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.optimize import linear_sum_assignment

from .errors import ValidationError
from .identify import Alignment
from .model import HawkesModel, require_stable
from .simulate import bin_events, simulate, simulate_inar

__all__ = [
    "MccResult",
    "KernelError",
    "ConvergenceReport",
    "mcc",
    "kernel_error",
    "transfer_error",
    "convergence_suite",
]


@dataclass(frozen=True)
class MccResult:
    """``assignment[j]`` is the estimated column matched to truth column j."""

    score: float
    assignment: np.ndarray
    correlations: np.ndarray
    matrix: np.ndarray

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "assignment": [int(a) for a in self.assignment],
            "correlations": [float(c) for c in self.correlations],
        }


def _abs_corr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    sa = np.sqrt(np.sum(ac * ac, axis=0))
    sb = np.sqrt(np.sum(bc * bc, axis=0))
    dead = (sa == 0).any() or (sb == 0).any()
    if dead:
        warnings.warn("zero-variance column; its correlations are set to 0", RuntimeWarning, stacklevel=3)
    c = (ac.T @ bc) / np.outer(np.where(sa > 0, sa, 1.0), np.where(sb > 0, sb, 1.0))
    c[sa == 0, :] = 0.0
    c[:, sb == 0] = 0.0
    return np.clip(np.abs(c), 0.0, 1.0)


def mcc(est, truth, method: str = "pearson") -> MccResult:
    """Mean matched absolute correlation under the optimal column assignment."""
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.shape != truth.shape or est.ndim != 2:
        raise ValidationError(f"shape mismatch {est.shape} vs {truth.shape}")
    if est.shape[0] < 10:
        raise ValidationError("need at least 10 samples")
    if method == "spearman":
        est = stats.rankdata(est, axis=0)
        truth = stats.rankdata(truth, axis=0)
    elif method != "pearson":
        raise ValidationError(f"unknown correlation method {method!r}")
    c = _abs_corr(truth, est)
    rows, cols = linear_sum_assignment(-c)
    assignment = np.empty(truth.shape[1], dtype=int)
    assignment[rows] = cols
    matched = c[np.arange(truth.shape[1]), assignment]
    return MccResult(float(matched.mean()), assignment, matched, c)


@dataclass(frozen=True)
class KernelError:
    value: float
    relative: bool


def kernel_error(phi_hat, phi_true, alignment: Alignment | None = None) -> KernelError:
    """||aligned(phi_hat) - phi||_F / ||phi||_F; absolute when phi is zero."""
    phi_hat = np.asarray(phi_hat)
    phi_true = np.asarray(phi_true)
    if phi_hat.shape != phi_true.shape:
        raise ValidationError(f"shape mismatch {phi_hat.shape} vs {phi_true.shape}")
    aligned = alignment.apply_kernel(phi_hat) if alignment is not None else phi_hat
    diff = float(np.linalg.norm(aligned - phi_true))
    ref = float(np.linalg.norm(phi_true))
    if ref == 0:
        return KernelError(diff, False)
    return KernelError(diff / ref, True)


def transfer_error(h_hat, h_true, alignment: Alignment | None = None) -> float:
    """Worst relative Frobenius error over a stack of (F, p, p) transfer matrices."""
    h_hat = np.asarray(h_hat)
    h_true = np.asarray(h_true)
    if h_hat.shape != h_true.shape:
        raise ValidationError(f"shape mismatch {h_hat.shape} vs {h_true.shape}")
    errs = [kernel_error(a, b, alignment).value for a, b in zip(h_hat, h_true)]
    return float(max(errs))


@dataclass(frozen=True)
class ConvergenceReport:
    """Per-delta gaps averaged over seeds; ``per_seed_*`` have shape (seeds, deltas)."""

    deltas: tuple[float, ...]
    mean_gap: np.ndarray
    var_gap: np.ndarray
    energy: np.ndarray
    per_seed_mean_gap: np.ndarray
    per_seed_var_gap: np.ndarray
    per_seed_energy: np.ndarray
    seeds: tuple[int, ...]

    def rows(self) -> list[dict]:
        return [
            {"delta": d, "mean_rate_gap": float(a), "variance_gap": float(b), "energy_distance": float(c)}
            for d, a, b, c in zip(self.deltas, self.mean_gap, self.var_gap, self.energy)
        ]

    def to_dict(self) -> dict:
        return {
            "deltas": list(self.deltas),
            "seeds": list(self.seeds),
            "mean_rate_gap": self.mean_gap.tolist(),
            "variance_gap": self.var_gap.tolist(),
            "energy_distance": self.energy.tolist(),
            "per_seed_mean_rate_gap": self.per_seed_mean_gap.tolist(),
            "per_seed_variance_gap": self.per_seed_var_gap.tolist(),
            "per_seed_energy_distance": self.per_seed_energy.tolist(),
        }


def convergence_suite(m: HawkesModel, deltas, horizon: float, seeds) -> ConvergenceReport:
    """Compare INAR(delta) samples with binned event-level simulations.

    For every seed one continuous-time path is binned at each delta, and an
    independent INAR path is drawn at that delta. Gaps are Euclidean norms
    over processes of the per-second mean rate and of the lag-0 variance
    divided by delta; the distributional distance is the energy distance
    between pooled bin counts.
    """
    deltas = tuple(float(d) for d in deltas)
    if not deltas or any(d <= 0 for d in deltas) or any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise ValidationError("deltas must be positive and strictly decreasing")
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ValidationError("need at least one seed")
    require_stable(m)
    shape = (len(seeds), len(deltas))
    mg, vg, en = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    for a, seed in enumerate(seeds):
        events = simulate(m, horizon, seed)
        for b, d in enumerate(deltas):
            cont = bin_events(events, d).counts.astype(float)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                disc = simulate_inar(m, d, horizon, seed=seed).counts.astype(float)
            mg[a, b] = np.linalg.norm(disc.mean(axis=0) - cont.mean(axis=0)) / d
            vg[a, b] = np.linalg.norm(disc.var(axis=0) - cont.var(axis=0)) / d
            en[a, b] = stats.energy_distance(disc.ravel(), cont.ravel())
    return ConvergenceReport(deltas, mg.mean(axis=0), vg.mean(axis=0), en.mean(axis=0), mg, vg, en, seeds)
