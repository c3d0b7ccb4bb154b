"""Seeded random streams.

Every consumer asks for a stream by name (``"init/layers.3.wq"``,
``"batch/train/120"``...).  Streams are Philox-4x64 generators, a 64-bit
counter-based bit generator, keyed by ``(seed, blake2b(name))`` so that
streams are independent of the order in which they are requested.
"""

import hashlib

import numpy as np

_MASK = (1 << 64) - 1


def name_key(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest(), "little")


def stream(seed: int, name: str) -> np.random.Generator:
    key = np.array([seed & _MASK, name_key(name)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
