"""Deterministic random-stream derivation.

Every source of randomness in the package is a numpy Generator obtained
from a root seed plus a path of named tags, so that independent pieces of
work (trajectories, restarts, Monte-Carlo estimates) never share or race
on a stream.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK32 = 0xFFFFFFFF


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK32
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"rng path parts must be int or str, got {type(part)!r}")


def derive_rng(*path) -> np.random.Generator:
    """Generator keyed by the full path, e.g. derive_rng(seed, "data", i)."""
    if not path:
        raise ValueError("rng path must not be empty")
    return np.random.default_rng([_key(p) for p in path])
