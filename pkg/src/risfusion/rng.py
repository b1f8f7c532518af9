"""Seeded SplitMix64 generator.

Counter-based, so a block of ``n`` outputs is produced with vectorised uint64
arithmetic. Streams are bit-identical across platforms, which the toy text
embedder and the data generator rely on.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(value: int) -> int:
    """Scalar SplitMix64 finaliser, handy for deriving sub-seeds."""
    with np.errstate(over="ignore"):
        return int(_mix(np.array([value & _MASK64], dtype=np.uint64))[0])


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


class SplitMix64:
    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK64
        self._state = self.seed

    def uint64(self, n: int) -> np.ndarray:
        n = int(n)
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * _GOLDEN
            out = _mix(np.uint64(self._state) + steps)
        self._state = (self._state + n * int(_GOLDEN)) & _MASK64
        return out

    def random(self, size=None) -> np.ndarray:
        """Uniform doubles in [0, 1) with 53 random bits."""
        shape = () if size is None else size
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.uint64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return u.reshape(shape)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return low + (high - low) * self.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        shape = () if size is None else size
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self.random(m)  # (0, 1]
        u2 = self.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return loc + scale * z.reshape(shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        if high <= low:
            raise ValueError("integers: high must exceed low")
        shape = () if size is None else size
        return (low + np.floor(self.random(shape) * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.random(n), kind="stable")

    def spawn(self, key: int) -> "SplitMix64":
        """Independent child stream keyed by ``key``; does not advance the parent."""
        return SplitMix64(mix64(self.seed ^ mix64(int(key) + 0x632BE59BD9B4E019)))
