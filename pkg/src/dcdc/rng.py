"""Reproducible random streams.

Every sampler in the package draws from a Philox generator (a counter-based
bit generator) keyed by ``(seed, purpose, index)``.  Work is split into
fixed-size chunks whose substream depends only on the chunk index, so
results do not depend on how many workers evaluate the chunks.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["Streams", "purpose_key"]


def purpose_key(purpose: str) -> int:
    """Stable 32-bit integer for a purpose label."""
    return zlib.crc32(purpose.encode("utf-8"))


class Streams:
    """Factory of independent Philox generators derived from one seed."""

    def __init__(self, seed: int):
        if int(seed) < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)

    def generator(self, purpose: str, *index: int) -> np.random.Generator:
        key = (purpose_key(purpose),) + tuple(int(i) for i in index)
        ss = np.random.SeedSequence(self.seed, spawn_key=key)
        return np.random.Generator(np.random.Philox(ss))

    def child(self, purpose: str, index: int = 0) -> "Streams":
        """Derived stream family, e.g. for one stage of a multi-stage run."""
        g = self.generator(purpose, index)
        return Streams(int(g.integers(0, 2**63 - 1)))

    def __repr__(self) -> str:
        return f"Streams(seed={self.seed})"
