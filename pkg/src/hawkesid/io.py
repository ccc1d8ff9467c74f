"""Artifact file formats: CSV series, JSON documents and atomic writes."""

from __future__ import annotations

import csv
import io as _io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .cumulants import CPFactors, CumulantTensor
from .errors import ValidationError
from .simulate import BinnedCounts, EventSequence, Observation
from .spectral import SpectralDensity, SpectralFactor

__all__ = [
    "atomic_write",
    "write_json",
    "read_json",
    "encode_complex",
    "decode_complex",
    "write_events",
    "read_events",
    "write_counts",
    "read_counts",
    "write_series",
    "read_series",
    "spectra_to_dict",
    "spectra_from_dict",
    "factor_to_dict",
    "factor_from_dict",
    "cumulant_to_dict",
    "cumulant_from_dict",
    "cp_to_dict",
    "cp_from_dict",
]


def atomic_write(path, data: str | bytes) -> Path:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": "", "encoding": "utf-8"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def write_json(path, obj) -> Path:
    return atomic_write(path, json.dumps(obj, indent=2) + "\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def encode_complex(a) -> list:
    """Nested lists with each complex entry as [re, im]."""
    a = np.asarray(a, dtype=complex)
    return np.stack([a.real, a.imag], axis=-1).tolist()


def decode_complex(obj) -> np.ndarray:
    a = np.asarray(obj, dtype=float)
    if a.shape[-1] != 2:
        raise ValidationError("complex arrays are stored as [re, im] pairs")
    return a[..., 0] + 1j * a[..., 1]


def _csv_text(header: list[str], rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_events(path, seq: EventSequence) -> Path:
    """Rows ``process_id,timestamp`` (1-based ids, 12 decimals) in time order."""
    ids = np.concatenate([np.full(len(e), j + 1) for j, e in enumerate(seq.events)]) if seq.p else np.zeros(0)
    times = np.concatenate(seq.events) if seq.p else np.zeros(0)
    order = np.lexsort((ids, times))
    rows = ((int(ids[k]), f"{times[k]:.12f}") for k in order)
    return atomic_write(path, _csv_text(["process_id", "timestamp"], rows))


def read_events(path, p: int, horizon: float) -> EventSequence:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return EventSequence(horizon, tuple(np.zeros(0) for _ in range(p)))
    ids = data[:, 0].astype(int)
    if ids.min() < 1 or ids.max() > p:
        raise ValidationError(f"process ids outside 1..{p}")
    return EventSequence(horizon, tuple(np.sort(data[ids == j + 1, 1]) for j in range(p)))


def write_counts(path, b: BinnedCounts) -> Path:
    """Rows ``t0,z_1..z_p`` with the left edge of every bin."""
    header = ["t0"] + [f"z_{j + 1}" for j in range(b.p)]
    t0 = np.arange(b.n_bins) * b.delta
    rows = ([repr(float(t))] + [int(v) for v in row] for t, row in zip(t0, b.counts))
    return atomic_write(path, _csv_text(header, rows))


def _delta_from(t0: np.ndarray, delta: float | None) -> float:
    if delta is not None:
        return float(delta)
    if t0.size < 2:
        raise ValidationError("cannot infer bin width from fewer than two rows")
    return float(np.round(t0[1] - t0[0], 12))


def read_counts(path, delta: float | None = None) -> BinnedCounts:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return BinnedCounts(_delta_from(data[:, 0], delta), data[:, 1:].astype(np.int64))


def write_series(path, x, delta: float, prefix: str = "o") -> Path:
    """Real-valued series as ``t0,<prefix>_1..`` with round-trip float text."""
    x = np.asarray(x, dtype=float)
    header = ["t0"] + [f"{prefix}_{j + 1}" for j in range(x.shape[1])]
    t0 = np.arange(x.shape[0]) * delta
    rows = ([repr(float(t))] + [repr(float(v)) for v in row] for t, row in zip(t0, x))
    return atomic_write(path, _csv_text(header, rows))


def read_series(path, delta: float | None = None) -> Observation:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Observation(_delta_from(data[:, 0], delta), data[:, 1:])


def spectra_to_dict(s: SpectralDensity) -> dict:
    return {
        "n_freq": s.n_freq,
        "p": s.p,
        "clip_mass": s.clip_mass,
        "n_segments": s.n_segments,
        "frequencies": s.frequencies.tolist(),
        "matrices": encode_complex(s.matrices),
    }


def spectra_from_dict(d: dict) -> SpectralDensity:
    return SpectralDensity(decode_complex(d["matrices"]), float(d.get("clip_mass", 0.0)), int(d.get("n_segments", 1)))


def factor_to_dict(f: SpectralFactor) -> dict:
    return {
        "n_freq": f.n_freq,
        "p": f.p,
        "G": encode_complex(f.G),
        "sigma": np.asarray(f.sigma).tolist(),
        "residual": f.residual,
        "iterations": f.iterations,
        "projection": None if f.projection is None else np.asarray(f.projection).tolist(),
    }


def factor_from_dict(d: dict) -> SpectralFactor:
    proj = d.get("projection")
    return SpectralFactor(
        decode_complex(d["G"]),
        np.asarray(d["sigma"], dtype=float),
        float(d["residual"]),
        int(d["iterations"]),
        None if proj is None else np.asarray(proj, dtype=float),
    )


def cumulant_to_dict(t: CumulantTensor) -> dict:
    return {"order": t.order, "dim": t.dim, "lags": list(t.lags), "data": t.data.ravel().tolist()}


def cumulant_from_dict(d: dict) -> CumulantTensor:
    order, dim = int(d["order"]), int(d["dim"])
    data = np.asarray(d["data"], dtype=float).reshape((dim,) * order)
    return CumulantTensor(order, dim, tuple(int(v) for v in d["lags"]), data)


def cp_to_dict(cp: CPFactors, extra: dict | None = None) -> dict:
    out = {
        "rank": cp.rank,
        "order": cp.order,
        "weights": cp.weights.tolist(),
        "factors": cp.factors.tolist(),
        "residual": cp.residual,
    }
    out.update(extra or {})
    return out


def cp_from_dict(d: dict) -> CPFactors:
    w = np.asarray(d["weights"], dtype=float)
    return CPFactors(w, np.asarray(d["factors"], dtype=float), float(d["residual"]), int(d["order"]))
