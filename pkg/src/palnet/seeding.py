"""Deterministic, named random streams derived from a single experiment seed.

Each component (init, augmentation, batching, ...) pulls its own stream so
toggling one knob never shifts the randomness seen by another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_entropy(tag) -> int:
    digest = hashlib.blake2b(repr(tag).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def stream(seed: int, *tags) -> np.random.Generator:
    """A generator keyed by (seed, *tags); stable across runs."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_entropy(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))
