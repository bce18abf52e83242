"""Seedable PRNG primitives shared by every component that shuffles or samples.

The generator is splitmix64, chosen because the whole algorithm fits in a
dozen lines and therefore can be reproduced exactly in any language or
runtime: dataset splits, batch schedules, and dropout masks derived from it
are stable across platforms and Python versions.
"""

from __future__ import annotations

from typing import Sequence, TypeVar

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15

T = TypeVar("T")


class SplitMix64:
    """splitmix64: state advances by the golden-ratio gamma, output is mixed."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection sampling (no modulo bias)."""
        if n <= 0:
            raise ValueError(f"next_below requires n >= 1, got {n}")
        limit = _MASK64 - (_MASK64 + 1) % n
        while True:
            x = self.next_u64()
            if x <= limit:
                return x % n

    def next_float(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


def derive_seed(seed: int, *streams: int) -> int:
    """Derive an independent 64-bit seed from a base seed and stream indices.

    Used to give each (epoch, source, purpose) its own stream without the
    streams ever sharing state.
    """
    x = SplitMix64(seed).next_u64()
    for s in streams:
        x = SplitMix64(x ^ (s & _MASK64)).next_u64()
    return x


def fisher_yates(items: Sequence[T], seed: int) -> list[T]:
    """Return a new list holding `items` shuffled by the classic backward
    Fisher-Yates walk driven by SplitMix64(seed)."""
    out = list(items)
    rng = SplitMix64(seed)
    for i in range(len(out) - 1, 0, -1):
        j = rng.next_below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out
