"""Named random substreams derived from a single master seed.

Every consumer asks for ``rng(seed, "purpose", i, j)`` instead of sharing a
global generator, so results never depend on call order or worker count.
"""

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def seed_sequence(seed: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))


def rng(seed: int, *path) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *path))


def derive_seed(seed: int, *path) -> int:
    """A 63-bit integer seed for the substream at ``path``."""
    state = seed_sequence(seed, *path).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
