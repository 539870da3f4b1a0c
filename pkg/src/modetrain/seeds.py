"""Deterministic seed derivation.

All randomness in the package flows from a single integer seed. Sub-streams
are derived from (seed, purpose-tag, indices...) so that runs are reproducible
bit-for-bit across platforms and so independent components never share a stream.
"""

from __future__ import annotations

import zlib

import numpy as np


def _encode_tag(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    raise TypeError(f"seed tags must be int or str, got {type(tag).__name__}")


def seed_sequence(seed: int, *tags) -> np.random.SeedSequence:
    """SeedSequence for (seed, *tags); tags may be strings or integers."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_encode_tag(t) for t in tags]
    return np.random.SeedSequence(entropy)


def spawn(seed: int, *tags) -> np.random.Generator:
    """New PCG64 generator for the derived stream (seed, *tags)."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *tags)))


def child_seed(seed: int, *tags) -> int:
    """Derived 64-bit integer seed, for APIs that take a plain seed."""
    return int(seed_sequence(seed, *tags).generate_state(1, np.uint64)[0])
