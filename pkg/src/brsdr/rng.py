"""Seed plumbing.

Every random draw in the package comes from a named substream of a root
seed. Substreams are keyed by a hash of their label, so introducing a new
stream never shifts the numbers an existing stream produces.
"""

import hashlib

import numpy as np


def label_key(label: str) -> int:
    digest = hashlib.blake2b(label.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def substream_seed(seed: int, label: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & (2**64 - 1), label_key(label)])


def substream(seed: int, label: str) -> np.random.Generator:
    """Generator for the ``label`` stream of root ``seed`` (PCG64)."""
    return np.random.Generator(np.random.PCG64(substream_seed(seed, label)))


def child_seed(seed: int, label: str) -> int:
    """Derive a 64-bit integer seed, e.g. for a replication or a chain."""
    return int(substream_seed(seed, label).generate_state(1, np.uint64)[0])


def int32_seed(seed: int, label: str) -> int:
    """31-bit seed for code paths (numba kernels) that take a plain integer."""
    return int(substream_seed(seed, label).generate_state(1, np.uint32)[0] >> 1)
