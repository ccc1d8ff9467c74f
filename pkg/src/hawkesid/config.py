"""Pipeline configuration: JSON schema, defaults and diagnostics with line numbers."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from pathlib import Path

import jsonschema

from .errors import ConfigError

__all__ = ["SCHEMA", "DEFAULTS", "load_config", "resolve_config", "validate_config", "config_hash"]

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int = {"type": "integer", "minimum": 0}
_pair = {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2}

_KERNEL = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["exponential", "powerlaw", "rectangular", "zero"]},
        "params": {"type": "object", "additionalProperties": {"type": ["number", "null"]}},
    },
    "additionalProperties": False,
}

_MODEL = {
    "type": "object",
    "required": ["p", "baseline", "kernels"],
    "properties": {
        "p": {"type": "integer", "minimum": 1},
        "baseline": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
        "kernels": {"type": "array", "items": {"type": "array", "items": _KERNEL}},
    },
    "additionalProperties": False,
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "hawkesid pipeline configuration",
    "type": "object",
    "required": ["model"],
    "additionalProperties": False,
    "properties": {
        "model": {"oneOf": [_MODEL, {"type": "string", "minLength": 1}]},
        "mixing": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["linear", "mlp", "identity"]},
                "n": {"type": "integer", "minimum": 1},
                "layers": {"type": "integer", "minimum": 1},
                "slope": _pos,
                "seed": _int,
            },
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "horizon": _pos,
                "delta": _pos,
                "seed": _int,
                "method": {"enum": ["thinning", "inar"]},
                "noise": {
                    "type": "object",
                    "required": ["kind"],
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"enum": ["poisson", "gaussian", "mixture"]},
                        "sigma": _pos,
                        "weights": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                        "means": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                        "sds": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
                    },
                },
            },
        },
        "environments": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "count": {"type": "integer", "minimum": 1},
                "kind": {"enum": ["hard", "soft"]},
                "targets": {"type": "array", "items": _pair},
                "factors": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "values": {"type": "array", "items": {"type": "number", "minimum": 0}},
            },
        },
        "estimation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_freq": {"type": "integer", "minimum": 2},
                "taper": {"enum": ["hann", "none", None]},
                "segments": {"type": ["integer", "null"], "minimum": 1},
                "wilson_tol": _pos,
                "cumulant": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "orders": {
                            "type": "array",
                            "items": {"type": "integer", "minimum": 2, "maximum": 4},
                            "minItems": 1,
                        },
                        "preprocess": {"enum": ["difference", "center", "none"]},
                    },
                },
                "cp": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "rank": {"type": ["integer", "null"], "minimum": 1},
                        "restarts": {"type": "integer", "minimum": 1},
                        "tol": _pos,
                        "max_residual": _pos,
                    },
                },
            },
        },
        "identify": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rank_tol": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "snapshots": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                "kernel_fit": {"type": "boolean"},
            },
        },
        "evaluate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mcc_method": {"enum": ["pearson", "spearman"]},
                "convergence": {
                    "type": ["object", "null"],
                    "additionalProperties": False,
                    "required": ["deltas", "horizon", "seeds"],
                    "properties": {
                        "deltas": {"type": "array", "items": _pos, "minItems": 1},
                        "horizon": _pos,
                        "seeds": {"type": "array", "items": _int, "minItems": 1},
                    },
                },
            },
        },
        "output": {"type": "string"},
        "threads": {"type": "integer", "minimum": 1},
    },
}

DEFAULTS = {
    "mixing": {"kind": "linear", "n": None, "layers": 2, "slope": 0.2, "seed": 0},
    "simulation": {"horizon": 100.0, "delta": 0.1, "seed": 0, "method": "thinning", "noise": {"kind": "poisson"}},
    "environments": {"count": 1, "kind": "soft", "targets": [], "factors": [], "values": []},
    "estimation": {
        "n_freq": 128,
        "taper": "hann",
        "segments": None,
        "wilson_tol": 1e-9,
        "cumulant": {"orders": [4], "preprocess": "difference"},
        "cp": {"rank": None, "restarts": 10, "tol": 1e-9, "max_residual": 0.5},
    },
    "identify": {"rank_tol": None, "snapshots": [0.0, math.pi / 4, math.pi / 2], "kernel_fit": False},
    "evaluate": {"mcc_method": "pearson", "convergence": None},
    "output": "hawkesid_out",
    "threads": None,
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _line_of(text: str, path) -> int | None:
    """Best-effort line of the last key on ``path`` in the JSON source."""
    pos = 0
    found = None
    for part in path:
        if isinstance(part, str):
            idx = text.find(json.dumps(part), pos)
            if idx < 0:
                break
            pos = idx + 1
            found = idx
    return None if found is None else text.count("\n", 0, found) + 1


def validate_config(doc: dict, text: str | None = None) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if not errors:
        return
    lines = []
    for e in errors:
        path = list(e.absolute_path)
        if e.validator == "additionalProperties" and isinstance(e.instance, dict):
            extra = sorted(set(e.instance) - set(e.schema.get("properties", {})))
            path += extra[:1]
        field = ".".join(str(p) for p in path) or "<root>"
        line = _line_of(text, path) if text is not None else None
        where = f"line {line}: " if line is not None else ""
        lines.append(f"{where}field {field}: {e.message}")
    raise ConfigError("invalid configuration\n  " + "\n  ".join(lines))


def resolve_config(doc: dict, text: str | None = None, base: Path | None = None) -> dict:
    """Validate a parsed document, fill defaults and inline a model given by path."""
    validate_config(doc, text)
    cfg = _merge(DEFAULTS, doc)
    if isinstance(cfg["model"], str):
        mpath = Path(cfg["model"])
        if not mpath.is_absolute() and base is not None:
            mpath = base / mpath
        if not mpath.exists():
            raise ConfigError(f"field model: file {mpath} does not exist")
        try:
            model = json.loads(mpath.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"field model: cannot load {mpath}: {exc}") from None
        try:
            jsonschema.validate(model, _MODEL)
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"field model ({mpath}): {exc.message}") from None
        cfg["model"] = model
    return cfg


def load_config(path) -> dict:
    """Parse, validate and fill defaults. Relative model paths resolve against the config file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}: invalid JSON: {exc.msg}") from None
    return resolve_config(doc, text, path.parent)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()
