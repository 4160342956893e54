"""Seedable random number generation with explicit, portable state.

Two published generators are implemented from their reference constants:
SplitMix64 (Steele, Lea, Flood 2014) for seed derivation and scene
sampling, and xoshiro256** (Blackman, Vigna 2018) for everything with
long-lived state (weight init, training). xoshiro256** state is four
64-bit words, i.e. exactly the 32 bytes stored in checkpoints. Nothing
in the package draws from numpy's global or Generator RNGs, so streams
are reproducible from a seed alone on any platform.
"""

from __future__ import annotations

import struct

import numpy as np

_MASK64 = (1 << 64) - 1

_SM64_GAMMA = 0x9E3779B97F4A7C15
_SM64_MUL1 = 0xBF58476D1CE4E5B9
_SM64_MUL2 = 0x94D049BB133111EB


def mix64(x: int) -> int:
    """Stateless SplitMix64 finalizer; a 64-bit bijective hash."""
    z = (x + _SM64_GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * _SM64_MUL1) & _MASK64
    z = ((z ^ (z >> 27)) * _SM64_MUL2) & _MASK64
    return z ^ (z >> 31)


def _u64_to_unit(x: int) -> float:
    # 53-bit mantissa; result lies in [0, 1).
    return (x >> 11) * 2.0**-53


class SplitMix64:
    """SplitMix64 sequence generator.

    Used where a cheap, splittable stream is wanted: each scene in the
    synthetic dataset gets its own generator seeded with
    mix64(dataset_seed ^ mix64(index + 1)), so scenes are independent of
    each other and of how many came before.
    """

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _SM64_GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _SM64_MUL1) & _MASK64
        z = ((z ^ (z >> 27)) * _SM64_MUL2) & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        return _u64_to_unit(self.next_u64())

    def uniform_in(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def randint(self, n: int) -> int:
        """Integer in [0, n). Multiply-shift bounding; bias is O(n / 2**64)."""
        return (self.next_u64() * n) >> 64


class Xoshiro256StarStar:
    """xoshiro256** generator with 256-bit state.

    State round-trips losslessly through 32 little-endian bytes, which is
    the representation persisted in training checkpoints.
    """

    def __init__(self, seed: int):
        sm = SplitMix64(seed)
        self._s = [sm.next_u64() for _ in range(4)]
        if not any(self._s):  # the all-zero state is the one forbidden point
            self._s[0] = 1

    @classmethod
    def from_state_bytes(cls, raw: bytes) -> "Xoshiro256StarStar":
        if len(raw) != 32:
            raise ValueError(f"xoshiro256** state must be 32 bytes, got {len(raw)}")
        gen = cls.__new__(cls)
        gen._s = list(struct.unpack("<4Q", raw))
        return gen

    def state_bytes(self) -> bytes:
        return struct.pack("<4Q", *self._s)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        x = (s1 * 5) & _MASK64
        result = (((x << 7) | (x >> 57)) & _MASK64) * 9 & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        return _u64_to_unit(self.next_u64())

    def randint(self, n: int) -> int:
        return (self.next_u64() * n) >> 64

    def uniforms(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = _u64_to_unit(self.next_u64())
        return out

    def normals(self, shape, dtype=np.float32) -> np.ndarray:
        """Standard normals via the Box-Muller transform (trig form)."""
        count = int(np.prod(shape)) if shape else 1
        pairs = (count + 1) // 2
        u = np.empty(2 * pairs, dtype=np.float64)
        for i in range(pairs):
            # u1 in (0, 1] so the log is finite; u2 in [0, 1).
            u[2 * i] = ((self.next_u64() >> 11) + 1) * 2.0**-53
            u[2 * i + 1] = _u64_to_unit(self.next_u64())
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:count]
        return z.reshape(shape).astype(dtype)
