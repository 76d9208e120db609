"""Named random substreams derived from a single master seed.

Every source of randomness in a run (data generation, parameter init, each
training epoch, each evaluation episode) pulls its own generator from
``substream``, so any component can be re-run in isolation and still produce
the bytes it produced inside the full pipeline.
"""
from __future__ import annotations

import zlib

import numpy as np


def _encode(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def substream(seed: int, *names) -> np.random.Generator:
    """Generator for the substream identified by (seed, *names).

    Names may be strings ("train", "eval") or integers (epoch, episode index);
    the derivation is stable across runs and platforms.
    """
    entropy = [int(seed) & 0xFFFFFFFF] + [_encode(p) for p in names]
    return np.random.default_rng(np.random.SeedSequence(entropy))
