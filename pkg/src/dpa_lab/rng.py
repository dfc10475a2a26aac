"""Counter-based random number generation (splitmix64).

Every random draw in the lab flows through this module so that runs are
reproducible bit-for-bit from a single integer seed, in any implementation
language. The generator is the standard splitmix64 finalizer applied to a
counter:

    out_i = mix64(seed + (i + 1) * 0x9E3779B97F4A7C15)   (mod 2^64)

    mix64(z): z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
              z ^= z >> 27; z *= 0x94D049BB133111EB
              z ^= z >> 31

Uniform doubles take the top 53 bits: u = (out >> 11) * 2^-53, in [0, 1).
Gaussians use Box-Muller on consecutive uniform pairs:
    z0 = sqrt(-2 ln(1 - u1)) cos(2 pi u2),  z1 = ... sin(2 pi u2),
drawn pairwise from the stream (an odd request discards the trailing z1).
Bounded integers use floor(u * n). Shuffles are Fisher-Yates from the end.

Sub-streams come from `derive(seed, *tags)`:
    s = seed; for t in tags: s = mix64(s ^ mix64(t + GAMMA))
"""

from __future__ import annotations

import math

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def derive(seed: int, *tags: int) -> int:
    """Deterministic child seed for a tagged sub-stream."""
    s = seed & _MASK
    for t in tags:
        s = mix64(s ^ mix64((t + GAMMA) & _MASK))
    return s


def _mix64_vec(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Stateful view over the counter stream of one seed."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        self.counter = 0

    def next_u64(self) -> int:
        self.counter += 1
        return mix64((self.seed + self.counter * GAMMA) & _MASK)

    def raw(self, n: int) -> np.ndarray:
        """Next n stream outputs as uint64, vectorized."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(GAMMA)
            return _mix64_vec(z)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def uniforms(self, n: int) -> np.ndarray:
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normals(self, n: int, std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniforms(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return mean + std * z[:n]

    def normal_matrix(self, rows: int, cols: int, std: float = 1.0) -> np.ndarray:
        return self.normals(rows * cols, std=std).reshape(rows, cols)

    def integer(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return min(int(self.uniform() * n), n - 1)

    def integers(self, n: int, count: int) -> np.ndarray:
        u = self.uniforms(count)
        return np.minimum((u * n).astype(np.int64), n - 1)

    def shuffled(self, items):
        """Fisher-Yates permutation of a sequence (returns a new list)."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.integer(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def choice(self, items):
        return items[self.integer(len(items))]
