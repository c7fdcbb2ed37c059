"""Named random streams derived from one 64-bit seed.

Each consumer asks for ``stream(seed, name, *keys)``; streams are independent
of each other and of call order, so adding a new consumer never perturbs the
draws seen by existing ones.
"""
from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("init", "shuffle", "noise", "augment", "split", "balance", "sample", "synth")


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def stream(seed: int, name: str, *keys: int | str) -> np.random.Generator:
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(_key(name),) + tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))
