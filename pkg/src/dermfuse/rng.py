"""Deterministic 64-bit PRNG used for every dataset shuffle.

SplitMix64 (Steele, Lea & Flood 2014) is used instead of numpy's generators
so that recorded seeds reproduce the exact same splits in any language: the
algorithm is a handful of integer operations and is trivially portable.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


class SplitMix64:
    """SplitMix64 stream; all arithmetic mod 2**64."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_uint64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n) by modulo reduction.

        The modulo bias for n << 2**64 is negligible and, more importantly,
        the result is identical on every platform.
        """
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_uint64() % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle driven by this stream."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]
