"""Counter-based random streams.

Every stochastic step draws from ``stream(seed, *keys)``: a Philox generator
keyed by the run seed plus a path of integers or strings (e.g.
``("mask", step)``). Streams never share state, so any step can be
regenerated in isolation, which is what makes resumed runs bitwise equal to
uninterrupted ones.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"stream keys must be non-negative, got {part}")
    return int(part)


def seed_words(seed: int, *keys: int | str) -> list[int]:
    return [_key(seed)] + [_key(k) for k in keys]


def stream(seed: int, *keys: int | str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed_words(seed, *keys))))


def derive_seed(seed: int, *keys: int | str) -> int:
    """A 63-bit child seed, stable across platforms."""
    state = np.random.SeedSequence(seed_words(seed, *keys)).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)
