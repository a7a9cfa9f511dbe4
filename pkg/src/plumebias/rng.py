"""Seed splitting.

Every random draw in the package goes through :func:`generator`, which builds a
PCG64 stream from a base seed plus a tuple of keys. Keys may be ints or
strings; strings are hashed with blake2b so the stream a tile gets depends
on its id, never on its position in a list or on scheduling order.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key_to_int(key: int | str) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & _MASK64
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(seed: int, *keys: int | str) -> int:
    """Derive a child 64-bit seed from ``seed`` and a path of keys."""
    ss = np.random.SeedSequence(
        entropy=int(seed) & _MASK64, spawn_key=tuple(_key_to_int(k) for k in keys)
    )
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 32) | int(lo)


def generator(seed: int, *keys: int | str) -> np.random.Generator:
    ss = np.random.SeedSequence(
        entropy=int(seed) & _MASK64, spawn_key=tuple(_key_to_int(k) for k in keys)
    )
    return np.random.Generator(np.random.PCG64(ss))
