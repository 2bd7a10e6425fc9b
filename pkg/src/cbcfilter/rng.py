"""Counter-based random numbers keyed by (seed, stream, draw slot).

Every value is a pure function of its three keys, so per-student streams
can be generated in any order, or all at once with numpy, and still agree.

The construction is the SplitMix64 finaliser applied to a Weyl sequence:

    key(seed, i)      = mix(mix(seed + G) ^ ((i + 1) * G))
    bits(key, slot)   = mix(key + (slot + 1) * G)
    uniform           = (bits >> 11) * 2**-53          # in [0, 1)

with ``G = 0x9E3779B97F4A7C15`` and all arithmetic modulo 2**64.
"""
from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def mix64(z) -> np.ndarray:
    """SplitMix64 output function on a uint64 array."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class CounterRng:
    """Independent uniform streams, one per integer stream id."""

    def __init__(self, seed: int):
        if not 0 <= int(seed) <= _MASK:
            raise ValueError("seed must fit in 64 unsigned bits")
        self.seed = int(seed)
        with np.errstate(over="ignore"):
            self._root = mix64(np.array([self.seed], dtype=np.uint64) + GOLDEN)[0]

    def keys(self, streams) -> np.ndarray:
        s = np.asarray(streams, dtype=np.uint64)
        with np.errstate(over="ignore"):
            return mix64(self._root ^ ((s + np.uint64(1)) * GOLDEN))

    def bits(self, keys, slot) -> np.ndarray:
        """Raw 64-bit draws; ``slot`` may be a scalar or an array aligned with ``keys``."""
        slot = np.asarray(slot).astype(np.uint64)
        with np.errstate(over="ignore"):
            return mix64(np.asarray(keys, dtype=np.uint64) + (slot + np.uint64(1)) * GOLDEN)

    def uniform(self, keys, slot) -> np.ndarray:
        """One uniform in [0, 1) per key for draw ``slot``."""
        return (self.bits(keys, slot) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def integers(self, keys, slot, n) -> np.ndarray:
        """Uniform integers in ``[0, n)``; ``n`` may be an array."""
        u = self.uniform(keys, slot)
        return np.minimum((u * n).astype(np.int64), np.asarray(n, dtype=np.int64) - 1)
