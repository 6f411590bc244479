"""Seeded, counter-based random streams.

Every stage of the pipeline owns an independent stream keyed by
(seed, stream id), so stages can be re-run in isolation and still
reproduce bit-identical draws on any platform.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    if isinstance(tag, str):
        digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"stream tag must be int or str, got {type(tag).__name__}")


class RngStream:
    """Philox-backed gaussian/uniform source with derivable child streams.

    Identical (seed, stream, call sequence) produce identical arrays.
    All float output is 64-bit.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._gen = np.random.Generator(
            np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))
        )

    def child(self, *tags) -> "RngStream":
        """Derive an independent stream; same tags always give the same child."""
        h = self.stream
        for tag in tags:
            h = _splitmix64(h ^ _tag_to_int(tag))
        return RngStream(self.seed, h)

    def gaussian(self, shape) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def subset(self, n: int, k: int) -> np.ndarray:
        """First k indices of a random permutation of range(n), sorted."""
        idx = self._gen.permutation(n)[: min(k, n)]
        return np.sort(idx)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream})"
