"""Named random sub-streams derived from a master seed.

Every simulated entity (an environment, a path, one vehicle, one surface of
the point cloud) draws from its own generator keyed by a tuple of names, so
adding or removing one entity never shifts the draws of another.
"""
import hashlib

import numpy as np


def _key_words(key):
    digest = hashlib.blake2b(repr(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def substream(seed, *keys):
    """Return a generator for the stream named ``keys`` under ``seed``.

    >>> a = substream(7, "env", 0).random()
    >>> b = substream(7, "env", 0).random()
    >>> a == b
    True
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_words(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(rng):
    """Draw a 63-bit integer seed from ``rng`` (advances the stream once)."""
    return int(rng.integers(0, 2**63 - 1))
