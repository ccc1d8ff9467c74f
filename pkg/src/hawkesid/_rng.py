"""Counter-based random streams (Philox) with named, reproducible substreams."""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "substreams"]


def _key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def stream(seed: int, *names: str | int) -> np.random.Generator:
    """Generator for ``seed`` namespaced by ``names``; identical inputs give identical draws."""
    entropy = [int(seed) & (2**64 - 1)] + [_key(str(n)) for n in names]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def substreams(seed: int, count: int, *names: str | int) -> list[np.random.Generator]:
    return [stream(seed, *names, i) for i in range(count)]
