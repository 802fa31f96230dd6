"""Named RNG substreams.

Every source of randomness in a run is derived from one root seed plus a
tuple of names/indices, so independent parts of the pipeline (sampling,
curriculum, init, per-iteration draws) consume independent streams and any
single stream can be reproduced without replaying the others.
"""

from __future__ import annotations

import zlib

import numpy as np


def _token_to_int(token) -> int:
    if isinstance(token, (int, np.integer)):
        return int(token) & 0xFFFFFFFF
    return zlib.crc32(str(token).encode("utf-8"))


def substream(seed: int, *names) -> np.random.Generator:
    """Generator for the substream identified by ``names`` under ``seed``.

    Deterministic in (seed, names); streams with different names are
    statistically independent (SeedSequence spawn keys).
    """
    key = tuple(_token_to_int(t) for t in names)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def draws(seed: int, *names, shape=None) -> np.ndarray:
    """Standard-normal draws from a named substream (convenience)."""
    rng = substream(seed, *names)
    return rng.standard_normal(shape if shape is not None else ())
