"""Seeded random streams (xoshiro256** seeded through splitmix64).

Draws depend only on ``(seed, stream_id)`` and the call sequence, never on the
platform or on numpy's global state.
"""
import math

import numpy as np

from . import kernels

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x):
    """One splitmix64 step; returns ``(new_state, output)``."""
    x = (x + _GOLDEN) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


def _mix(x):
    return splitmix64(x & _MASK64)[1]


class RngStream:
    """A reproducible stream of pseudo-random numbers.

    ``stream_id`` tags an independent substream of the same seed; use
    :meth:`substream` to derive per-cell or per-input streams.
    """

    def __init__(self, seed, stream_id=0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        sm = self.seed ^ _mix(self.stream_id ^ 0xD1B54A32D192ED03)
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        if not any(words):  # all-zero state is a fixed point
            words[0] = 1
        self._state = np.array(words, dtype=np.uint64)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def substream(self, stream_id):
        """Independent stream keyed by this stream's identity and ``stream_id``."""
        return RngStream(self.seed, _mix(self.stream_id * 0x2545F4914F6CDD1D + int(stream_id) + 1))

    def state(self):
        return tuple(int(v) for v in self._state)

    def next_u64(self, n):
        out = np.empty(int(n), dtype=np.uint64)
        if out.size:
            kernels.xoshiro_fill(self._state, out)
        return out

    def uniform(self, shape=()):
        """Doubles in [0, 1) with 53 random bits."""
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def normal(self, shape=()):
        """Standard normal draws via Box-Muller."""
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self.uniform((2 * m,))
        r = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
        theta = 2.0 * math.pi * u[1::2]
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape)

    def rademacher(self, shape=()):
        n = int(np.prod(shape, dtype=np.int64))
        bits = (self.next_u64(n) >> np.uint64(63)).astype(np.float64)
        return (2.0 * bits - 1.0).reshape(shape)

    def bernoulli(self, p, shape=()):
        return (self.uniform(shape) < p).astype(np.float64)

    def integers(self, high, shape=()):
        """Integers in [0, high) (multiply-shift, bias below 2**-40 for small ``high``)."""
        u = self.uniform(shape)
        return np.minimum((u * high).astype(np.int64), high - 1)

    def permutation(self, n):
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform((n - 1,))
        for i in range(n - 1, 0, -1):
            j = min(int(u[n - 1 - i] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
