"""Named, reproducible random substreams.

Every random draw in the package comes from a generator keyed by a root
seed plus a path of names and indices, e.g. ``substream(7, "rep", 3)``.
Streams with different keys are statistically independent and do not
depend on the order in which they are created, so parallel and serial
runs draw identical numbers.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _word(key) -> int:
    if isinstance(key, (int, np.integer)) and not isinstance(key, bool):
        if key < 0:
            raise ValueError("substream keys must be non-negative")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(seed: int, *keys) -> np.random.SeedSequence:
    """SeedSequence for ``seed`` refined by ``keys`` (ints or strings)."""
    return np.random.SeedSequence([_word(seed), *map(_word, keys)])


def substream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for the stream named by ``keys`` under ``seed``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *keys)))


def derive_seed(seed: int, *keys) -> int:
    """A 63-bit integer seed for a child computation."""
    return int(seed_sequence(seed, *keys).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)
