"""Seed derivation shared by every randomized component.

A run is reproducible from one 64-bit master seed. Each consumer derives its
own sub-seed with ``derive_seed(master, round, purpose, ...)`` so that hash
functions, noise draws, cohort sampling and masks never share a stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1

GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a Python int (wraps to 64 bits)."""
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def mix64_array(x: np.ndarray) -> np.ndarray:
    """Vectorized SplitMix64 finalizer; ``x`` must be uint64 (wraps silently)."""
    z = x + np.uint64(GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def tag_value(tag: int | str) -> int:
    """Map a purpose tag to a 64-bit integer; strings hash via blake2b."""
    if isinstance(tag, (bool, np.bool_)):
        raise TypeError("boolean tags are ambiguous")
    if isinstance(tag, (int, np.integer)):
        return int(tag) & MASK64
    if isinstance(tag, str):
        digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"unsupported seed tag type {type(tag).__name__}")


def derive_seed(master: int, *tags: int | str) -> int:
    """Derive a sub-seed from a master seed and a path of tags.

    The convention used across the package is
    ``derive_seed(master, round_index, purpose, *extra)``, for example
    ``derive_seed(seed, 2, "first-sketch")``.
    """
    h = mix64(tag_value(master))
    for tag in tags:
        h = mix64(h ^ tag_value(tag))
    return h


def make_rng(master: int, *tags: int | str) -> np.random.Generator:
    """Independent numpy Generator for ``(master, *tags)``."""
    return np.random.Generator(np.random.PCG64(derive_seed(master, *tags)))
