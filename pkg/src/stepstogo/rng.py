"""Named random streams.

Every consumer of randomness gets its own generator derived by hashing a
component name together with the run seed (and optional integer indices), so
adding a consumer never shifts another one's stream.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, *names: object) -> int:
    h = hashlib.sha256(repr((int(seed),) + tuple(names)).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def derive_rng(seed: int, *names: object) -> np.random.Generator:
    """Return an independent PCG64 generator for ``(seed, *names)``."""
    return np.random.Generator(np.random.PCG64(stream_key(seed, *names)))


def derive_seed(seed: int, *names: object) -> int:
    """Derive a child integer seed (63-bit, JSON safe)."""
    return stream_key(seed, *names) >> 1
