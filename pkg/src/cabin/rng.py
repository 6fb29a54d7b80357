"""Seedable 64-bit random number generation.

Every randomized decision in this package (splits, noise, shuffles,
clustering seeds, feature perturbation) draws from SplitMix64 so that a
run reproduces bit-identically from an integer seed on any platform.
The state is a single 64-bit counter advanced by the golden-ratio
increment; each output is the murmur-style avalanche of the new state.

Substreams are derived with :meth:`SplitMix64.derive` from (seed, tags)
rather than by consuming draws from a parent stream, so adding a new
consumer never shifts the draws seen by unrelated code.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_U64_GAMMA = np.uint64(_GAMMA)
_SHIFT_30 = np.uint64(30)
_SHIFT_27 = np.uint64(27)
_SHIFT_31 = np.uint64(31)
_SHIFT_11 = np.uint64(11)
_U64_MIX1 = np.uint64(_MIX1)
_U64_MIX2 = np.uint64(_MIX2)
_INV_2_53 = 2.0 ** -53


def mix64(value: int) -> int:
    """Avalanche finalizer; a bijection on 64-bit integers."""
    z = value & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """SplitMix64 stream with scalar and vectorized draw paths.

    The vectorized paths advance the counter exactly as the scalar ones
    do, so mixing them cannot change the sequence.
    """

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    @classmethod
    def derive(cls, seed: int, *tags: int) -> "SplitMix64":
        """Independent substream keyed by (seed, tags); order of tags matters."""
        s = seed & _MASK64
        for tag in tags:
            s = mix64(s ^ mix64(tag))
        return cls(s)

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return mix64(self._state)

    def _raw_block(self, n: int) -> np.ndarray:
        """n outputs as a uint64 array; wraps via numpy modular arithmetic."""
        if n == 0:
            return np.empty(0, dtype=np.uint64)
        idx = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self._state) + _U64_GAMMA * idx
        self._state = (self._state + n * _GAMMA) & _MASK64
        z = (z ^ (z >> _SHIFT_30)) * _U64_MIX1
        z = (z ^ (z >> _SHIFT_27)) * _U64_MIX2
        return z ^ (z >> _SHIFT_31)

    def uniform(self) -> float:
        """Float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * _INV_2_53

    def uniforms(self, n: int) -> np.ndarray:
        return (self._raw_block(n) >> _SHIFT_11).astype(np.float64) * _INV_2_53

    def normal(self) -> float:
        return float(self.normals(1)[0])

    def normals(self, shape) -> np.ndarray:
        """Standard normal draws via Box-Muller; two uniforms per value."""
        n = int(np.prod(shape)) if not isinstance(shape, int) else shape
        raw = self._raw_block(2 * n)
        # u1 in (0, 1] keeps the log finite; u2 in [0, 1).
        u1 = ((raw[0::2] >> _SHIFT_11) + np.uint64(1)).astype(np.float64) * _INV_2_53
        u2 = (raw[1::2] >> _SHIFT_11).astype(np.float64) * _INV_2_53
        out = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
        return out if isinstance(shape, int) else out.reshape(shape)

    def randint(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        limit = _MASK64 + 1 - ((_MASK64 + 1) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, items, k: int) -> list:
        """k draws without replacement, via partial Fisher-Yates."""
        pool = list(items)
        n = len(pool)
        if not 0 <= k <= n:
            raise ValueError(f"cannot sample {k} from population of {n}")
        for i in range(k):
            j = i + self.randint(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def choice_weighted(self, weights: np.ndarray) -> int:
        """Index drawn with probability proportional to nonnegative weights."""
        cum = np.cumsum(weights, dtype=np.float64)
        total = cum[-1]
        if not total > 0:
            raise ValueError("weights must have positive sum")
        u = self.uniform() * total
        return int(np.searchsorted(cum, u, side="right"))
