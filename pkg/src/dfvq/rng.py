"""Deterministic counter-based random number generation.

The generator is SplitMix64 used in counter mode: draw ``i`` of a stream is
``mix(seed_state + (i + 1) * GAMMA)`` where ``mix`` is the SplitMix64
finalizer. Because every draw depends only on (seed, counter), blocks of any
size can be produced with vectorized uint64 arithmetic and the stream is
identical on every platform.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_U53 = 1.0 / float(1 << 53)


def _mix(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer, elementwise on uint64."""
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


class Rng:
    """Seeded deterministic stream of uniform/normal/integer draws."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._counter = 0

    def spawn(self, key: int) -> "Rng":
        """Independent child stream; derived seed = mix(seed XOR key)."""
        with np.errstate(over="ignore"):
            derived = _mix(np.uint64(self.seed) ^ np.uint64(int(key) & 0xFFFFFFFFFFFFFFFF))
        return Rng(int(derived))

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw uint64 words."""
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + idx * _GAMMA)

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform floats in [0, 1), float64, C-order fill."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _U53
        return u.reshape(shape) if shape else float(u[0])

    def normal(self, shape=()) -> np.ndarray:
        """Standard normals via Box-Muller (no rejection, fixed draw count)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u1 = np.maximum(self.uniform(n), _U53)  # avoid log(0)
        u2 = self.uniform(n)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(shape) if shape else float(z[0])

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high). Uses floor(uniform * span)."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        u = self.uniform(shape if shape else (1,))
        out = (low + np.floor(u * (high - low))).astype(np.int64)
        return out.reshape(shape) if shape else int(out[0])

    def choice(self, n: int) -> int:
        return self.integers(0, n)

    def shuffled(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (sort by random keys)."""
        keys = self.raw(n)
        return np.argsort(keys, kind="stable")

    def categorical(self, probs: np.ndarray) -> int:
        """Single draw from a probability vector."""
        c = np.cumsum(np.asarray(probs, dtype=np.float64))
        u = self.uniform() * c[-1]
        return int(np.searchsorted(c, u, side="right").clip(0, len(c) - 1))
