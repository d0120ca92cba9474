"""Stateless random-stream derivation.

Every source of randomness in training and sampling is a pure function of a
key tuple (seed, purpose, step, prompt id, ...). Streams never depend on
execution order or worker scheduling, which is what makes runs reproducible
bit-for-bit and independent of parallelism degree.
"""

from __future__ import annotations

import hashlib

import numpy as np

KeyPart = int | str


def _digest(parts: tuple[KeyPart, ...]) -> int:
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, bool) or not isinstance(part, (int, str)):
            raise TypeError(f"rng key parts must be int or str, got {type(part).__name__}")
        h.update(repr(part).encode())
        h.update(b"\x1f")  # separator so ("ab",) != ("a","b")
    return int.from_bytes(h.digest(), "little")


def derive_rng(*parts: KeyPart) -> np.random.Generator:
    """Return a Generator keyed by `parts`; same key -> same stream."""
    if not parts:
        raise ValueError("rng key must be nonempty")
    return np.random.default_rng(np.random.SeedSequence(_digest(parts)))
