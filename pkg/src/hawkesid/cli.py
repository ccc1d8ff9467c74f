"""Command line entry point: ``hawkesid <command> --config <path> [--out DIR] [--threads N]``."""

from __future__ import annotations

import argparse
import hashlib
import os
import platform
import sys
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

from .config import config_hash, load_config, resolve_config
from .errors import ConfigError, UnstableModelError
from .io import write_json
from .pipeline import STAGES

__all__ = ["main", "run_command", "cmd_simulate", "cmd_estimate", "cmd_identify", "cmd_evaluate", "cmd_pipeline"]

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
COMMANDS = ("simulate", "estimate", "identify", "evaluate", "pipeline")


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for name in ("artifact", "numpy", "scipy", "numba", "jsonschema"):
        try:
            out[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            out[name] = None
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _error_record(stage: str, exc: BaseException) -> dict:
    rec = {"stage": stage, "type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, UnstableModelError) and exc.report is not None:
        rec["spectral_radius"] = float(exc.report.spectral_radius)
    return rec


def run_command(command: str, cfg: dict, out: Path, threads: int | None) -> tuple[int, dict]:
    """Run one stage (or all of them), then write the manifest atomically."""
    stages = list(STAGES) if command == "pipeline" else [command]
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_sha256": config_hash({k: v for k, v in cfg.items() if k not in ("output", "threads")}),
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "versions": _versions(),
        "threads": threads,
        "status": "ok",
        "error": None,
        "artifacts": [],
        "timings": {},
    }
    code = EXIT_OK
    paths: list[Path] = []
    for stage in stages:
        t0 = time.perf_counter()
        try:
            paths += STAGES[stage](cfg, out, threads)
        except ConfigError as exc:
            manifest.update(status="error", error=_error_record(stage, exc))
            code = EXIT_CONFIG
        except Exception as exc:  # noqa: BLE001 - every module failure is serialized
            manifest.update(status="error", error=_error_record(stage, exc))
            code = EXIT_RUNTIME
        manifest["timings"][stage] = time.perf_counter() - t0
        if code:
            break
    manifest["artifacts"] = [
        {"path": p.relative_to(out).as_posix(), "sha256": _sha256(p), "bytes": p.stat().st_size}
        for p in paths
        if p.exists()
    ]
    name = "run_manifest.json" if command == "pipeline" else f"manifest_{command}.json"
    write_json(out / name, manifest)
    return code, manifest


def _resolve(cfg: dict, out: str | None, threads: int | None) -> tuple[Path, int]:
    out_dir = out or os.environ.get("HAWKESID_OUT") or cfg["output"]
    env_threads = os.environ.get("HAWKESID_THREADS")
    if threads is None and env_threads:
        try:
            threads = int(env_threads)
        except ValueError:
            raise ConfigError(f"HAWKESID_THREADS must be an integer, got {env_threads!r}") from None
    if threads is None:
        threads = cfg["threads"] or os.cpu_count() or 1
    if threads < 1:
        raise ConfigError("thread count must be >= 1")
    return Path(out_dir), threads


def _command(name: str):
    def run(config, out=None, threads=None) -> int:
        try:
            cfg = resolve_config(config) if isinstance(config, dict) else load_config(config)
            out_dir, n = _resolve(cfg, out, threads)
        except ConfigError as exc:
            print(f"hawkesid: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return run_command(name, cfg, out_dir, n)[0]

    run.__name__ = f"cmd_{name}"
    run.__doc__ = f"Run the {name} command from a config path (or loaded dict); returns the exit code."
    return run


cmd_simulate = _command("simulate")
cmd_estimate = _command("estimate")
cmd_identify = _command("identify")
cmd_evaluate = _command("evaluate")
cmd_pipeline = _command("pipeline")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hawkesid", description="Latent Hawkes simulation and identification pipeline."
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON configuration file")
    parser.add_argument("--out", default=None, help="output directory (overrides config and HAWKESID_OUT)")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (overrides HAWKESID_THREADS)")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        out, threads = _resolve(cfg, args.out, args.threads)
    except ConfigError as exc:
        print(f"hawkesid: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    code, manifest = run_command(args.command, cfg, out, threads)
    if code:
        err = manifest["error"]
        print(f"hawkesid: {args.command} failed in {err['stage']}: {err['type']}: {err['message']}", file=sys.stderr)
    else:
        print(f"hawkesid: {args.command} wrote {len(manifest['artifacts'])} artifacts to {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
