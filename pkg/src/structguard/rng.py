"""Deterministic pseudo-random streams shared by every generator in the package.

Nothing in the package touches global RNG state: each randomized routine
builds its own stream from an explicit integer seed, so identical arguments
always produce identical artifacts regardless of call order or platform.

The stream is a xoshiro256** generator whose four 64-bit state words are
filled from the user seed with splitmix64 (the seeding procedure recommended
for the xoshiro family). Reference first outputs of splitmix64 at seed 0 are
0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F; frozen test
vectors for the combined generator live in tests/test_rng.py.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state, returning (new_state, output word)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def splitmix64_sequence(seed: int, count: int) -> list[int]:
    """First ``count`` splitmix64 outputs for ``seed``."""
    state = seed & _MASK64
    out = []
    for _ in range(count):
        state, word = _splitmix64(state)
        out.append(word)
    return out


def derive_seed(master: int, index: int) -> int:
    """Deterministically derive the ``index``-th child seed of ``master``.

    Used to fan one experiment seed out into independent streams (splits,
    probes, optimizer) without correlated low bits.
    """
    if index < 0:
        raise ValueError("index must be nonnegative")
    return splitmix64_sequence(master, index + 1)[-1]


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256(object):
    """xoshiro256** stream seeded through splitmix64.

    Provides the handful of draw types the package needs: raw 64-bit words,
    uniforms in [0,1), standard normals (Box-Muller), bounded integers by
    rejection (no modulo bias), and a Fisher-Yates shuffle.
    """

    __slots__ = ("s", "_cached_normal")

    def __init__(self, seed: int):
        state = seed & _MASK64
        s = []
        for _ in range(4):
            state, word = _splitmix64(state)
            s.append(word)
        self.s = s
        self._cached_normal: float | None = None

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (2.0**-53)

    def normal(self) -> float:
        """Standard normal via Box-Muller; pairs are cached for determinism."""
        if self._cached_normal is not None:
            z = self._cached_normal
            self._cached_normal = None
            return z
        u1 = 1.0 - self.uniform()  # in (0, 1], keeps the log finite
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._cached_normal = r * math.sin(theta)
        return r * math.cos(theta)

    def normals(self, count: int) -> np.ndarray:
        return np.array([self.normal() for _ in range(count)], dtype=np.float64)

    def uniforms(self, count: int) -> np.ndarray:
        return np.array([self.uniform() for _ in range(count)], dtype=np.float64)

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample_indices(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), in shuffled draw order."""
        if not 0 <= k <= n:
            raise ValueError("k must satisfy 0 <= k <= n")
        idx = list(range(n))
        self.shuffle(idx)
        return idx[:k]
