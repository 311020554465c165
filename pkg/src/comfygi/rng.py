"""Seeded random source used by all sampling code.

Backed by numpy's PCG64 so the same seed yields the same draw sequence on
every platform. Independent streams (one per neighbor slot, per batch run)
are derived by hashing the identifying coordinates with sha256, never by
splitting a shared stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["Rng", "derive_child_seed"]


def derive_child_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary coordinates (ints or strings).

    ``derive_child_seed(run_seed, generation, operator_index, slot)`` gives
    each neighbor slot its own stream, so slots can be sampled in any order
    or in parallel without changing results.
    """
    token = "\x1f".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.sha256(token).digest()
    return int.from_bytes(digest[:8], "big")


class Rng:
    """Deterministic pseudo-random generator (PCG64)."""

    def __init__(self, seed: int):
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def int_between(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi], both ends inclusive."""
        return int(self._gen.integers(lo, hi + 1))

    def real(self, lo: float, hi: float) -> float:
        """Uniform real in [lo, hi)."""
        return float(self._gen.uniform(lo, hi))

    def choice(self, seq):
        """Uniform element of a non-empty sequence."""
        if not seq:
            raise ValueError("choice from an empty sequence")
        return seq[self.int_between(0, len(seq) - 1)]
