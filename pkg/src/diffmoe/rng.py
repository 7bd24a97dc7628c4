"""Counter-based random number generator.

Every draw is a pure function of (seed, counter), so streams are bit-identical
across runs and platforms and the full state serializes to two integers.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer, vectorized over uint64 arrays."""
    z = (z + _GAMMA) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _fnv64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


class Rng:
    """Deterministic stream of uniforms, normals, Gumbels and integers.

    `child(tag)` derives an independent stream, so components can own their
    randomness without coupling to each other's draw counts.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)
        self._key = _mix(np.uint64([self.seed]))[0]

    def state(self) -> tuple[int, int]:
        return self.seed, self.counter

    @classmethod
    def from_state(cls, state: tuple[int, int]) -> "Rng":
        return cls(state[0], state[1])

    def child(self, tag) -> "Rng":
        """Derive an independent stream keyed by a string/int tag (or tuple of them)."""
        if isinstance(tag, tuple):
            data = b"\x1f".join(str(t).encode() for t in tag)
        else:
            data = str(tag).encode()
        mixed = _mix(np.uint64([self._key]) ^ np.uint64([_fnv64(data)]))[0]
        return Rng(int(mixed))

    def _words(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        return _mix(_mix(idx) ^ self._key)

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform float64 in [0, 1)."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._words(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape) if shape else u[0]

    def normal(self, shape=()) -> np.ndarray:
        """Standard normals via Box-Muller (portable, no rejection)."""
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = np.maximum(self.uniform((m,)), 2.0 ** -53)
        u2 = self.uniform((m,))
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        return z.reshape(shape) if shape else z[0]

    def gumbel(self, shape=()) -> np.ndarray:
        """Gumbel(0,1) noise: -log(-log(U)) with U clamped to [1e-12, 1-1e-12]."""
        u = np.clip(self.uniform(shape), 1e-12, 1.0 - 1e-12)
        return -np.log(-np.log(u))

    def integers(self, lo: int, hi: int, shape=()) -> np.ndarray:
        """Uniform integers in [lo, hi)."""
        if hi <= lo:
            raise ValueError(f"empty integer range [{lo}, {hi})")
        u = self.uniform(shape)
        return (lo + np.floor(u * (hi - lo))).astype(np.int64)

    def bernoulli(self, p: float, shape=()) -> np.ndarray:
        return (self.uniform(shape) < p).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        keys = self._words(n)
        return np.argsort(keys, kind="stable")

    def choice(self, n: int, size: int) -> np.ndarray:
        """Sample `size` indices from range(n) without replacement."""
        if size > n:
            raise ValueError("sample larger than population")
        return self.permutation(n)[:size]
