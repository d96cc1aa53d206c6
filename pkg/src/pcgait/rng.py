"""Deterministic 64-bit PRNG used everywhere randomness is needed.

xorshift64* (shifts 12/25/27, multiplier 0x2545F4914F6CDD1D) with a
splitmix64 finalizer for deriving independent child seeds. Pure integer
arithmetic, so streams are identical on every platform and Python build,
which is what makes same-seed dataset/training reruns byte-identical.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
_MULT = 0x2545F4914F6CDD1D
_GOLDEN = 0x9E3779B97F4A7C15  # replaces the degenerate all-zero state
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def splitmix64(x: int) -> int:
    """One splitmix64 finalizer round; used to hash seeds and indices."""
    x = (x + _GOLDEN) & MASK64
    x ^= x >> 30
    x = (x * _MIX1) & MASK64
    x ^= x >> 27
    x = (x * _MIX2) & MASK64
    x ^= x >> 31
    return x


def derive_seed(seed: int, *indices: int) -> int:
    """Fold indices into a seed, giving decorrelated per-item streams."""
    s = splitmix64(seed & MASK64)
    for i in indices:
        s = splitmix64(s ^ ((i & MASK64) * _GOLDEN & MASK64))
    return s


class Xorshift64Star:
    """Marsaglia xorshift64* generator."""

    def __init__(self, seed: int):
        self.state = (seed & MASK64) or _GOLDEN

    def next_u64(self) -> int:
        s = self.state
        s ^= (s >> 12)
        s ^= (s << 25) & MASK64
        s ^= (s >> 27)
        self.state = s
        return (s * _MULT) & MASK64

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        # top 53 bits -> double in [0, 1)
        u = (self.next_u64() >> 11) * 2.0 ** -53
        return lo + u * (hi - lo)

    def uniform_array(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """n uniform draws, identical to n successive uniform() calls."""
        out = np.empty(n, dtype=np.float64)
        s = self.state
        scale = hi - lo
        for i in range(n):
            s ^= s >> 12
            s ^= (s << 25) & MASK64
            s ^= s >> 27
            u = (((s * _MULT) & MASK64) >> 11) * 2.0 ** -53
            out[i] = lo + u * scale
        self.state = s
        return out

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("n must be positive")
        span = (MASK64 + 1) - (MASK64 + 1) % n
        while True:
            u = self.next_u64()
            if u < span:
                return u % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n) via partial Fisher-Yates."""
        if k > n:
            raise ValueError("sample larger than population")
        pool = list(range(n))
        for i in range(k):
            j = i + self.randint(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def choices(self, n: int, k: int) -> list[int]:
        """k indices from range(n), with replacement."""
        return [self.randint(n) for _ in range(k)]
