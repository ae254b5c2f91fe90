"""Deterministic, platform-independent PRNG for reproducible sampling.

The generator is xoshiro256** (Blackman & Vigna), seeded through splitmix64.
Both are implemented with plain Python integers masked to 64 bits, so a given
seed produces the same stream on every platform and Python build. Floats in
[0, 1) are derived from the top 53 bits, the usual double-precision recipe.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1


def _splitmix64_next(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def splitmix64_stream(seed: int, count: int) -> list[int]:
    """First `count` splitmix64 outputs for `seed` (used to derive sub-seeds)."""
    state = seed & _MASK64
    out = []
    for _ in range(count):
        state, value = _splitmix64_next(state)
        out.append(value)
    return out


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256StarStar:
    """xoshiro256** with splitmix64 seeding. State is local to the instance."""

    def __init__(self, seed: int):
        self._s = splitmix64_stream(seed, 4)
        if not any(self._s):  # all-zero state is the one forbidden fixpoint
            self._s[0] = 1

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (2.0 ** -53)
