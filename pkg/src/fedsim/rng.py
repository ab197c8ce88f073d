"""Seeded PRNG used for client sampling and local training.

xoshiro256** with splitmix64 seeding. Implemented here (rather than via
numpy's bit generators) so that clients written in other languages can
reproduce the exact same draw sequence with ~40 lines of integer math.
All state and outputs are unsigned 64-bit.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x`` (already advanced)."""
    x = (x + _GOLDEN) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def mix_seed(seed: int, *tags: int) -> int:
    """Derive a sub-seed by folding integer tags into ``seed``.

    Used to give each round (and each derived purpose) its own stream,
    e.g. ``mix_seed(seed, round_index)``.
    """
    h = seed & _MASK64
    for t in tags:
        h = _splitmix64(h ^ (t & _MASK64))
    return h


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256(object):
    """xoshiro256** generator seeded through splitmix64."""

    def __init__(self, seed: int):
        s = seed & _MASK64
        state = []
        for _ in range(4):
            state.append(_splitmix64(s))
            s = (s + _GOLDEN) & _MASK64
        self._s = state

    @classmethod
    def from_state(cls, state: list[int]) -> "Xoshiro256":
        """Construct from four raw state words (test hook)."""
        rng = cls.__new__(cls)
        rng._s = [w & _MASK64 for w in state]
        return rng

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randbelow(self, n: int) -> int:
        """Integer in [0, n). Plain modulo; bias is irrelevant here and
        the reduction is trivial to reproduce in other languages."""
        if n <= 0:
            raise ValueError("randbelow requires n >= 1")
        return self.next_u64() % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates, drawing j for i = n-1 .. 1."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]
