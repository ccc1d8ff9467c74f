"""Kernel-DAG embedding, multi-environment linear systems and parameter recovery.

Graphs use the structural-equation convention x = M x + e: ``M[i, c] != 0``
is an edge c -> i, so the children of node c are the nonzero rows of column
c. In the bipartite embedding of a kernel snapshot, nodes 0..p-1 are the
present copies (targets) and nodes p..2p-1 the lagged copies (sources), and
``M[i, p + j] = Phi[i, j]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.optimize import linear_sum_assignment

from .errors import NotIdentifiableError, RankDeficiencyError, ValidationError

__all__ = [
    "KernelDag",
    "Intervention",
    "EnvironmentSet",
    "NodeSystem",
    "NodeDiagnostics",
    "VarietyReport",
    "KernelSolution",
    "BaselineEstimate",
    "Alignment",
    "embed_kernel_dag",
    "generic_support",
    "block_zero_mask",
    "embedded_snapshot",
    "assemble_polysystem",
    "stacked_system",
    "numerical_rank",
    "variety_dimension",
    "solve_kernels",
    "recover_baseline",
    "align",
    "fit_exponential",
    "CHILD_THRESHOLD",
]

CHILD_THRESHOLD = 1e-10


def _closure(children: tuple[frozenset[int], ...]) -> tuple[frozenset[int], ...]:
    q = len(children)
    reach = [set(c) for c in children]
    changed = True
    while changed:
        changed = False
        for c in range(q):
            extra = set().union(*(reach[i] for i in reach[c])) - reach[c] if reach[c] else set()
            if extra:
                reach[c] |= extra
                changed = True
    return tuple(frozenset(r) for r in reach)


@dataclass(frozen=True)
class KernelDag:
    """Support pattern (and weights) of a kernel graph on q nodes."""

    matrix: np.ndarray
    p: int
    child_sets: tuple[frozenset[int], ...] = field(init=False)
    descendant_sets: tuple[frozenset[int], ...] = field(init=False)

    def __post_init__(self):
        m = np.array(self.matrix)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or not np.all(np.isfinite(m)):
            raise ValidationError("kernel graph matrix must be square and finite")
        m.flags.writeable = False
        mask = np.abs(m) > CHILD_THRESHOLD
        children = tuple(frozenset(np.flatnonzero(mask[:, c]).tolist()) for c in range(m.shape[0]))
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "child_sets", children)
        object.__setattr__(self, "descendant_sets", _closure(children))

    @classmethod
    def from_matrix(cls, m, p: int | None = None) -> "KernelDag":
        """Graph from a strictly upper-triangular weight matrix."""
        m = np.asarray(m)
        if np.any(np.abs(np.tril(m)) > CHILD_THRESHOLD):
            raise ValidationError("kernel DAG must be strictly upper triangular")
        return cls(m, p if p is not None else m.shape[0])

    @classmethod
    def from_support(cls, mask, p: int) -> "KernelDag":
        """Support pattern only (unit weights); need not be acyclic."""
        return cls(np.asarray(mask, dtype=float), p)

    @property
    def q(self) -> int:
        return self.matrix.shape[0]

    @property
    def is_acyclic(self) -> bool:
        return all(c not in de for c, de in enumerate(self.descendant_sets))

    @property
    def bipartite(self) -> bool:
        return self.q == 2 * self.p and all(not (ch - set(range(self.p))) for ch in self.child_sets) and all(
            not self.child_sets[c] for c in range(self.p)
        )

    def multi_hop(self, c: int) -> frozenset[int]:
        """de(c) minus ch(c): descendants reached only through longer paths."""
        return self.descendant_sets[c] - self.child_sets[c]

    def source_children(self) -> tuple[frozenset[int], ...]:
        """For the bipartite embedding: targets of each lagged source j = 0..p-1."""
        return tuple(self.child_sets[self.p + j] for j in range(self.p))

    @property
    def phi(self) -> np.ndarray:
        return np.asarray(self.matrix[: self.p, self.p:])


def embed_kernel_dag(phi) -> KernelDag:
    """M = [[0, Phi], [0, 0]]."""
    phi = np.asarray(phi)
    if phi.ndim != 2 or phi.shape[0] != phi.shape[1] or not np.all(np.isfinite(phi)):
        raise ValidationError("kernel snapshot must be a finite square matrix")
    p = phi.shape[0]
    m = np.zeros((2 * p, 2 * p), dtype=np.result_type(phi, float))
    m[:p, p:] = phi
    return KernelDag(m, p)


def generic_support(p: int) -> KernelDag:
    """All 3p^2 entries of the upper-left, upper-right and lower-right blocks."""
    mask = np.ones((2 * p, 2 * p))
    mask[p:, :p] = 0
    return KernelDag.from_support(mask, p)


def block_zero_mask(n: int, p: int) -> np.ndarray:
    """Known zeros of the block-diagonal embedded mixing diag(F, F) (2n x 2p)."""
    mask = np.zeros((2 * n, 2 * p), dtype=bool)
    mask[:n, p:] = True
    mask[n:, :p] = True
    return mask


def embedded_snapshot(mixing, phi) -> np.ndarray:
    """K_G = diag(F, F) (I + M) for the bipartite embedding of ``phi``."""
    f = np.asarray(mixing)
    phi = np.asarray(phi)
    n, p = f.shape
    out = np.zeros((2 * n, 2 * p), dtype=np.result_type(f, phi))
    out[:n, :p] = f
    out[:n, p:] = f @ phi
    out[n:, p:] = f
    return out


@dataclass(frozen=True)
class Intervention:
    """Entries (i, c) of M changed relative to the reference environment.

    ``hard`` replaces each entry by a known value (default 0); ``soft``
    changes it to an unknown value.
    """

    entries: tuple[tuple[int, int], ...]
    kind: str = "soft"
    values: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("hard", "soft"):
            raise ValidationError(f"intervention kind must be hard or soft, got {self.kind!r}")
        entries = tuple((int(i), int(c)) for i, c in self.entries)
        object.__setattr__(self, "entries", entries)
        if self.kind == "hard":
            vals = tuple(float(v) for v in (self.values or (0.0,) * len(entries)))
            if len(vals) != len(entries):
                raise ValidationError("hard intervention needs one value per entry")
            object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class EnvironmentSet:
    """Snapshots K^(0..K) of the embedded transfer; environment 0 is the reference."""

    snapshots: tuple[np.ndarray, ...]
    interventions: tuple[Intervention | None, ...] | None = None
    labels: tuple[str, ...] | None = None
    mixing_zeros: np.ndarray | None = None

    def __post_init__(self):
        snaps = tuple(np.array(s) for s in self.snapshots)
        if not snaps:
            raise ValidationError("need at least one environment")
        shape = snaps[0].shape
        if any(s.shape != shape or s.ndim != 2 for s in snaps):
            raise ValidationError("all snapshots must share one matrix shape")
        for s in snaps:
            s.flags.writeable = False
        ivs = self.interventions if self.interventions is not None else (None,) * len(snaps)
        if len(ivs) != len(snaps):
            raise ValidationError("one intervention entry per environment")
        if ivs[0] is not None:
            raise ValidationError("environment 0 is the reference and carries no intervention")
        labels = self.labels if self.labels is not None else tuple(f"env{k}" for k in range(len(snaps)))
        zeros = None
        if self.mixing_zeros is not None:
            zeros = np.array(self.mixing_zeros, dtype=bool)
            if zeros.shape != shape:
                raise ValidationError("mixing_zeros must match the snapshot shape")
            zeros.flags.writeable = False
        object.__setattr__(self, "snapshots", snaps)
        object.__setattr__(self, "interventions", tuple(ivs))
        object.__setattr__(self, "labels", tuple(labels))
        object.__setattr__(self, "mixing_zeros", zeros)

    def __len__(self) -> int:
        return len(self.snapshots)

    def subset(self, count: int) -> "EnvironmentSet":
        return EnvironmentSet(
            self.snapshots[:count], self.interventions[:count], self.labels[:count], self.mixing_zeros
        )


@dataclass(frozen=True)
class NodeSystem:
    """coefficient @ x = rhs in the unknowns attached to one source node."""

    node: int
    children: tuple[int, ...]
    multi_hop: tuple[int, ...]
    unknowns: tuple[tuple, ...]
    coefficient: np.ndarray
    rhs: np.ndarray


def _entry_map(envs: EnvironmentSet, c: int, k: int, support: frozenset[int]):
    """Per target row i: ('ref', i), ('env', k, i) or ('known', value) for M^(k)[i, c]."""
    out = {i: ("ref", i) for i in support}
    iv = envs.interventions[k]
    if iv is not None:
        for idx, (i, cc) in enumerate(iv.entries):
            if cc != c:
                continue
            out[i] = ("known", iv.values[idx]) if iv.kind == "hard" else ("env", k, i)
    return out


def assemble_polysystem(envs: EnvironmentSet, support: KernelDag, differenced: bool = True) -> tuple[NodeSystem, ...]:
    """Per-node linear systems from K^(k) (I - M^(k)) = F_G.

    Differenced assembly eliminates the shared mixing F_G through
    K^(k) M^(k) - K^(0) M^(0) = K^(k) - K^(0) and needs at least two
    environments. Rows where F_G is known to vanish (``mixing_zeros``) give
    direct equations K^(k) M^(k)[:, c] = K^(k)[:, c] in every environment.
    Undifferenced assembly keeps the column of F_G as unknowns instead.
    """
    if differenced and len(envs) < 2:
        raise ValidationError("differenced assembly needs at least two environments")
    q = envs.snapshots[0].shape[1]
    if support.q != q:
        raise ValidationError(f"support has {support.q} nodes but snapshots have {q} columns")
    rows_total = envs.snapshots[0].shape[0]
    zeros = envs.mixing_zeros if envs.mixing_zeros is not None else np.zeros((rows_total, q), dtype=bool)
    dtype = np.result_type(*envs.snapshots, float)
    systems = []
    for c in range(q):
        support_c = support.child_sets[c]
        maps = [_entry_map(envs, c, k, support_c) for k in range(len(envs))]
        labels: list[tuple] = [("ref", i) for i in sorted(support_c)]
        for k, mp in enumerate(maps):
            labels += sorted(v for v in mp.values() if v[0] == "env" and v not in labels)
        free_rows = [r for r in range(rows_total) if not zeros[r, c]]
        if not differenced:
            labels += [("F", r) for r in free_rows]
        if not any(lab[0] in ("ref", "env") for lab in labels):
            continue
        col = {lab: n for n, lab in enumerate(labels)}
        coef_rows, rhs_rows = [], []

        def add(k: int, sign: float, coef: np.ndarray, rhs: np.ndarray, rows):
            kk = envs.snapshots[k]
            for i, v in maps[k].items():
                if v[0] == "known":
                    rhs -= sign * kk[rows, i] * v[1]
                else:
                    coef[:, col[v]] += sign * kk[rows, i]

        structural = [r for r in range(rows_total) if zeros[r, c]]
        if structural:
            for k in range(len(envs)):
                coef = np.zeros((len(structural), len(labels)), dtype=dtype)
                rhs = np.array(envs.snapshots[k][structural, c], dtype=dtype)
                add(k, 1.0, coef, rhs, structural)
                coef_rows.append(coef)
                rhs_rows.append(rhs)
        if free_rows:
            if differenced:
                k0 = envs.snapshots[0]
                for k in range(1, len(envs)):
                    coef = np.zeros((len(free_rows), len(labels)), dtype=dtype)
                    rhs = np.array(envs.snapshots[k][free_rows, c] - k0[free_rows, c], dtype=dtype)
                    add(k, 1.0, coef, rhs, free_rows)
                    add(0, -1.0, coef, rhs, free_rows)
                    coef_rows.append(coef)
                    rhs_rows.append(rhs)
            else:
                for k in range(len(envs)):
                    coef = np.zeros((len(free_rows), len(labels)), dtype=dtype)
                    rhs = np.array(envs.snapshots[k][free_rows, c], dtype=dtype)
                    add(k, 1.0, coef, rhs, free_rows)
                    for n_r, r in enumerate(free_rows):
                        coef[n_r, col[("F", r)]] = 1.0
                    coef_rows.append(coef)
                    rhs_rows.append(rhs)
        coef = np.vstack(coef_rows) if coef_rows else np.zeros((0, len(labels)), dtype=dtype)
        rhs = np.concatenate(rhs_rows) if rhs_rows else np.zeros(0, dtype=dtype)
        systems.append(
            NodeSystem(c, tuple(sorted(support_c)), tuple(sorted(support.multi_hop(c))), tuple(labels), coef, rhs)
        )
    return tuple(systems)


def stacked_system(systems) -> tuple[np.ndarray, np.ndarray]:
    """Block-diagonal global system (unknowns of distinct nodes never interact)."""
    rows = sum(s.coefficient.shape[0] for s in systems)
    cols = sum(s.coefficient.shape[1] for s in systems)
    dtype = np.result_type(*(s.coefficient for s in systems), float) if systems else float
    a = np.zeros((rows, cols), dtype=dtype)
    b = np.zeros(rows, dtype=dtype)
    r0 = c0 = 0
    for s in systems:
        r, c = s.coefficient.shape
        a[r0:r0 + r, c0:c0 + c] = s.coefficient
        b[r0:r0 + r] = s.rhs
        r0, c0 = r0 + r, c0 + c
    return a, b


def numerical_rank(a: np.ndarray, rtol: float | None = None) -> int:
    """Singular values above max(rows, cols) * eps * sigma_max (or rtol * sigma_max)."""
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0:
        return 0
    tol = (rtol if rtol is not None else max(a.shape) * np.finfo(float).eps) * s[0]
    return int(np.sum(s > tol))


@dataclass(frozen=True)
class NodeDiagnostics:
    node: int
    n_children: int
    n_unknowns: int
    rank: int
    augmented_rank: int
    consistent: bool


@dataclass(frozen=True)
class VarietyReport:
    variety_dim: int
    per_node: tuple[NodeDiagnostics, ...]
    identifiable: bool
    systems: tuple[NodeSystem, ...] = ()


def variety_dimension(systems, rtol: float | None = None) -> VarietyReport:
    """dim = sum over nodes of (unknowns - rank); augmented-rank mismatch is flagged."""
    diags = []
    for s in systems:
        rank = numerical_rank(s.coefficient, rtol)
        aug = numerical_rank(np.column_stack([s.coefficient, s.rhs]), rtol) if s.coefficient.size else 0
        n_unknown = s.coefficient.shape[1]
        diags.append(NodeDiagnostics(s.node, len(s.children), n_unknown, rank, aug, aug == rank))
    dim = sum(d.n_unknowns - d.rank for d in diags)
    ok = dim == 0 and all(d.consistent for d in diags)
    return VarietyReport(dim, tuple(diags), ok, tuple(systems))


@dataclass(frozen=True)
class KernelSolution:
    reference: np.ndarray
    environments: tuple[np.ndarray, ...]
    mixing: np.ndarray
    residual: float
    node_residuals: dict

    @property
    def phi(self) -> np.ndarray:
        """Upper-right block of the reference graph (bipartite embedding)."""
        p = self.reference.shape[0] // 2
        return self.reference[:p, p:]

    def phi_env(self, k: int) -> np.ndarray:
        p = self.reference.shape[0] // 2
        return self.environments[k][:p, p:]


def solve_kernels(envs: EnvironmentSet, report: VarietyReport) -> KernelSolution:
    """Least-squares solution of the per-node systems; refuses when dim > 0."""
    if report.variety_dim > 0:
        raise NotIdentifiableError(f"variety dimension {report.variety_dim} > 0", report)
    q = envs.snapshots[0].shape[1]
    dtype = np.result_type(*envs.snapshots, float)
    ref = np.zeros((q, q), dtype=dtype)
    per_env = [np.zeros((q, q), dtype=dtype) for _ in range(len(envs))]
    env_values: dict = {}
    node_res = {}
    worst = 0.0
    for s in report.systems:
        if s.coefficient.shape[0] == 0:
            continue
        x, *_ = np.linalg.lstsq(s.coefficient, s.rhs, rcond=None)
        r = np.linalg.norm(s.coefficient @ x - s.rhs)
        scale = np.linalg.norm(s.rhs)
        rel = float(r / scale) if scale > 0 else float(r)
        node_res[s.node] = rel
        worst = max(worst, rel)
        for lab, val in zip(s.unknowns, x):
            if lab[0] == "ref":
                ref[lab[1], s.node] = val
            elif lab[0] == "env":
                env_values[(lab[1], lab[2], s.node)] = val
    for k in range(len(envs)):
        mk = ref.copy()
        iv = envs.interventions[k]
        if iv is not None:
            for idx, (i, c) in enumerate(iv.entries):
                mk[i, c] = iv.values[idx] if iv.kind == "hard" else env_values.get((k, i, c), mk[i, c])
        per_env[k] = mk
    mixing = envs.snapshots[0] @ (np.eye(q) - ref)
    return KernelSolution(ref, tuple(per_env), mixing, worst, node_res)


@dataclass(frozen=True)
class BaselineEstimate:
    baseline: np.ndarray
    clipped: float


def recover_baseline(obs_mean, k_hat, h0_hat=None, delta: float = 1.0) -> BaselineEstimate:
    """Least-squares solution of E[O] = K_hat H0_hat u delta, clipped at zero.

    ``clipped`` is the total magnitude removed by clipping. The scale of
    each coordinate follows the scale of the corresponding column of K_hat.
    """
    k_hat = np.asarray(k_hat, dtype=float)
    a = k_hat if h0_hat is None else k_hat @ np.real(np.asarray(h0_hat))
    if numerical_rank(a, 1e-10) < a.shape[1]:
        raise RankDeficiencyError("K_hat (times H0_hat) is not of full column rank")
    u, *_ = np.linalg.lstsq(a * delta, np.asarray(obs_mean, dtype=float), rcond=None)
    clipped = float(-u[u < 0].sum())
    return BaselineEstimate(np.maximum(u, 0.0), clipped)


@dataclass(frozen=True)
class Alignment:
    """``recovered[:, permutation[j]] ~ scales[j] * truth[:, j]``."""

    permutation: np.ndarray
    scales: np.ndarray
    similarity: float
    matched: np.ndarray

    def apply_columns(self, recovered: np.ndarray) -> np.ndarray:
        return np.asarray(recovered)[:, self.permutation] / self.scales

    def apply_kernel(self, phi_hat: np.ndarray) -> np.ndarray:
        """Kernel in truth coordinates: Phi[i, j] = Phi_hat[pi_i, pi_j] s_j / s_i."""
        sub = np.asarray(phi_hat)[np.ix_(self.permutation, self.permutation)]
        return sub * self.scales[None, :] / self.scales[:, None]

    def apply_vector(self, u_hat: np.ndarray) -> np.ndarray:
        return np.asarray(u_hat)[self.permutation] / self.scales

    def to_dict(self) -> dict:
        return {
            "permutation": [int(v) for v in self.permutation],
            "scales": [float(v) for v in self.scales],
            "similarity": float(self.similarity),
        }


def align(recovered, truth) -> Alignment:
    """Hungarian matching of columns by |cosine similarity|, with signed LS scales."""
    rec = np.asarray(recovered, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if rec.shape != tru.shape:
        raise ValidationError(f"shape mismatch {rec.shape} vs {tru.shape}")
    rn = np.linalg.norm(rec, axis=0)
    tn = np.linalg.norm(tru, axis=0)
    cos = (tru.T @ rec) / np.outer(np.where(tn > 0, tn, 1), np.where(rn > 0, rn, 1))
    rows, cols = linear_sum_assignment(-np.abs(cos))
    perm = np.empty(tru.shape[1], dtype=int)
    perm[rows] = cols
    scales = np.array([
        (rec[:, perm[j]] @ tru[:, j]) / (tn[j] ** 2) if tn[j] > 0 else 1.0 for j in range(tru.shape[1])
    ])
    scales[scales == 0] = 1.0
    matched = np.abs(cos[np.arange(tru.shape[1]), perm])
    return Alignment(perm, scales, float(matched.mean()), matched)


def _exp_discrete(alpha: float, beta: float, omegas: np.ndarray, delta: float) -> np.ndarray:
    q = np.exp(-beta * delta) * np.exp(-1j * omegas)
    return alpha * delta * q / (1 - q)


def fit_exponential(snapshots: np.ndarray, omegas, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Entrywise least-squares fit of discrete exponential kernels to Phi(omega) snapshots.

    ``snapshots`` has shape (F, p, p); the model for one entry is
    sum_{tau>=1} alpha delta e^{-beta tau delta} e^{-i omega tau}.
    """
    snaps = np.asarray(snapshots, dtype=complex)
    omegas = np.asarray(omegas, dtype=float)
    p = snaps.shape[1]
    alpha = np.zeros((p, p))
    beta = np.ones((p, p))
    for i in range(p):
        for j in range(p):
            y = snaps[:, i, j]

            def resid(theta):
                d = _exp_discrete(theta[0], np.exp(theta[1]), omegas, delta) - y
                return np.concatenate([d.real, d.imag])

            g0 = max(float(np.real(y[0])), 1e-6)
            sol = optimize.least_squares(resid, [g0, 0.0], bounds=([0.0, -6.0], [np.inf, 6.0]))
            alpha[i, j], beta[i, j] = sol.x[0], float(np.exp(sol.x[1]))
    return alpha, beta
