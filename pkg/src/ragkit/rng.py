"""Seeded randomness helpers.

Every random decision in the toolkit flows from one global seed through
named substreams, so modules stay deterministic without sharing generator
state.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return an independent generator for (seed, name).

    The same pair always yields the same stream; different names never
    collide in practice (the name is folded in through sha256).
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "big") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *words]))


def stable_hash(text: str, buckets: int) -> int:
    """Map text to a bucket index, stable across runs and platforms."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % buckets
