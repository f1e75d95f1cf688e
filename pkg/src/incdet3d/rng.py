"""Deterministic counter-based random source.

Outputs are a pure function of (seed, counter), so identical seeds and call
sequences give bit-identical results on every platform, and independent
sub-streams can be split off per scene/task without consuming state.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(z: int) -> int:
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _mix(seed: int, counter: int) -> int:
    return _splitmix64((seed ^ _splitmix64(counter)) & _MASK64)


def _splitmix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps, matching the scalar path bit for bit
    with np.errstate(over="ignore"):
        z = (z + np.uint64(_GOLDEN)).astype(np.uint64)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


class SeededRng:
    """Counter-based generator: value i of a stream is mix(seed, i)."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def split(self, *tags) -> "SeededRng":
        """Derive an independent sub-stream; pure function of seed and tags."""
        child = self.seed
        for tag in tags:
            if isinstance(tag, str):
                tag_val = _fnv1a64(tag)
            else:
                tag_val = int(tag) & _MASK64
            child = _mix(child, tag_val)
        return SeededRng(child)

    def _next_block(self, n: int) -> np.ndarray:
        counters = (np.arange(n, dtype=np.uint64) + np.uint64(self.counter)) & np.uint64(_MASK64)
        self.counter += n
        seeded = _splitmix64_array(counters) ^ np.uint64(self.seed)
        return _splitmix64_array(seeded)

    def next_u64(self) -> int:
        v = _mix(self.seed, self.counter)
        self.counter += 1
        return v

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        """Uniform doubles in [low, high) with 53-bit resolution."""
        if shape is None:
            u = (self.next_u64() >> 11) * 2.0**-53
            return low + (high - low) * u
        n = int(np.prod(shape))
        u = (self._next_block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape=None, mean: float = 0.0, std: float = 1.0):
        """Gaussian via Box-Muller; consumes a deterministic number of draws."""
        scalar = shape is None
        n = 1 if scalar else int(np.prod(shape))
        pairs = (n + 1) // 2
        raw = self._next_block(2 * pairs)
        u1 = ((raw[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[pairs:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        out = mean + std * z
        return float(out[0]) if scalar else out.reshape(shape)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) via multiply-shift (no modulo bias)."""
        if n <= 0:
            raise ValueError("randint upper bound must be positive")
        return (self.next_u64() * n) >> 64

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) by sorting random keys."""
        keys = self._next_block(n)
        return np.argsort(keys, kind="stable")
