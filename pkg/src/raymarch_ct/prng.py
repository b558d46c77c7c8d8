"""PCG32 pseudo-random numbers: scalar generator plus batched substreams.

All randomized pieces of the pipeline draw from PCG32 so that a seed fully
determines every sample position, noise realization, and parameter init,
independent of platform.
"""

from __future__ import annotations

import numpy as np

_MULT = np.uint64(6364136223846793005)
_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


class Pcg32:
    """Minimal PCG32 (XSH-RR variant), 64-bit state / 64-bit stream."""

    def __init__(self, seed: int, stream: int = 0):
        self.state = np.uint64(0)
        self.inc = np.uint64(((int(stream) << 1) | 1) & 0xFFFFFFFFFFFFFFFF)
        self.next_u32()
        self.state = np.uint64((int(self.state) + int(seed)) & 0xFFFFFFFFFFFFFFFF)
        self.next_u32()

    def next_u32(self) -> int:
        old = int(self.state)
        self.state = np.uint64((old * int(_MULT) + int(self.inc)) & 0xFFFFFFFFFFFFFFFF)
        xorshifted = ((old >> 18) ^ old) >> 27 & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def uniform(self) -> float:
        """One double in [0, 1)."""
        return self.next_u32() * 2.0**-32

    def uniforms(self, n: int) -> np.ndarray:
        return np.array([self.uniform() for _ in range(n)], dtype=np.float64)

    def next_u64(self) -> int:
        return (self.next_u32() << 32) | self.next_u32()


def _step(state: np.ndarray, inc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Advance a vector of PCG32 states; returns (new_state, u32 outputs)."""
    old = state
    new = (old * _MULT + inc) & _MASK64
    xorshifted = (((old >> np.uint64(18)) ^ old) >> np.uint64(27)).astype(np.uint32)
    rot = (old >> np.uint64(59)).astype(np.uint32)
    out = (xorshifted >> rot) | (xorshifted << ((np.uint32(0) - rot) & np.uint32(31)))
    return new, out


def batch_uniforms(seed: int, streams: np.ndarray, n: int) -> np.ndarray:
    """(len(streams), n) doubles in [0, 1); stream i matches Pcg32(seed, streams[i])."""
    streams = np.asarray(streams, dtype=np.uint64)
    inc = ((streams << np.uint64(1)) | np.uint64(1)) & _MASK64
    state = np.zeros_like(streams)
    state, _ = _step(state, inc)
    state = (state + np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)) & _MASK64
    state, _ = _step(state, inc)
    out = np.empty((len(streams), n), dtype=np.float64)
    for j in range(n):
        state, u32 = _step(state, inc)
        out[:, j] = u32 * 2.0**-32
    return out


def mix_seed(seed: int, salt: int) -> int:
    """Derive a decorrelated 64-bit seed (splitmix64 finalizer)."""
    z = (int(seed) + int(salt) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)
