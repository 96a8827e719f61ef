"""Deterministic named RNG substreams derived from one root seed.

Every random decision in the toolkit (folds, init, masking, dropout,
shuffling) draws from a stream named after its purpose, so one seed
reproduces a whole run while streams stay independent of each other.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *labels: str) -> int:
    """Stable 64-bit seed for the substream named by ``labels``."""
    digest = hashlib.blake2b("/".join(labels).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") ^ (seed & 0xFFFFFFFFFFFFFFFF)


def named_rng(seed: int, *labels: str) -> np.random.Generator:
    """Generator for the substream of ``seed`` named by ``labels``."""
    return np.random.default_rng(np.random.SeedSequence(derive_seed(seed, *labels)))
