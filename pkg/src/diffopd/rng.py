"""Named random streams derived from one master seed.

Every consumer asks for a stream by name path, e.g. ``stream(seed, "rollout", 2)``.
Streams are keyed by a stable hash of the path, so adding or reordering
consumers in one stage never shifts the draws of another.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.PCG64(ss))


def child(rng: np.random.Generator, *names) -> np.random.Generator:
    """Derive a sub-stream from an existing generator without consuming its draws."""
    parent = rng.bit_generator.seed_seq
    ss = np.random.SeedSequence(
        entropy=parent.entropy,
        spawn_key=tuple(parent.spawn_key) + tuple(_key(n) for n in names),
    )
    return np.random.Generator(np.random.PCG64(ss))
