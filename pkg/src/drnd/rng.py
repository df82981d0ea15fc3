"""Seeded random streams.

Every stream is a ``numpy.random.Generator`` over the counter-based Philox
bit generator.  Streams are addressed by a master seed plus a path of keys;
the path is folded into a ``SeedSequence`` entropy tuple, so

    make_rng(seed, "ppo", 3)

is independent of ``make_rng(seed, "ppo", 4)`` and of ``make_rng(seed, "drnd")``,
and adding a new key never perturbs an existing stream.  String keys are
mapped to integers with CRC-32 so the mapping is stable across processes
(unlike ``hash``).
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key: int | str) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def stream_entropy(seed: int, *keys: int | str) -> list[int]:
    return [_key_to_int(seed)] + [_key_to_int(k) for k in keys]


def make_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Return the generator for ``(seed, *keys)``."""
    ss = np.random.SeedSequence(stream_entropy(seed, *keys))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *keys: int | str) -> int:
    """A 63-bit integer seed for ``(seed, *keys)``, for APIs that take ints."""
    ss = np.random.SeedSequence(stream_entropy(seed, *keys))
    hi, lo = (int(v) for v in ss.generate_state(2, dtype=np.uint32))
    return ((hi << 32) | lo) & ((1 << 63) - 1)
