"""Seeded, platform-independent random number generation.

The generator is SplitMix64: a 64-bit Weyl counter advanced by the golden
gamma ``0x9E3779B97F4A7C15`` and finalized with the xorshift-multiply mix
``z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27; z *= 0x94D049BB133111EB;
z ^= z >> 31``. Because the state is a plain counter, a block of ``n`` draws is
computed in one vectorized numpy expression and is identical to ``n`` scalar
draws. All arithmetic is unsigned 64-bit with wraparound, so streams are
identical on every platform.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MUL1
    z = (z ^ (z >> np.uint64(27))) * _MUL2
    return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 stream.

    Parameters
    ----------
    seed : int
        Any Python integer; reduced modulo 2**64.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK64

    def __repr__(self):
        return f"Rng(state=0x{self.state:016x})"

    def next_u64(self, size: int) -> np.ndarray:
        """Next ``size`` raw 64-bit outputs as a ``uint64`` array."""
        size = int(size)
        if size < 0:
            raise ValueError(f"size must be >= 0, got {size}")
        steps = np.arange(1, size + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * _GAMMA
            out = _mix(z)
        self.state = (self.state + size * int(_GAMMA)) & _MASK64
        return out

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from the current state and ``key``.

        Does not advance this stream.
        """
        base = np.array([(self.state ^ (int(key) * 0xD1B54A32D192ED03)) & _MASK64],
                        dtype=np.uint64)
        with np.errstate(over="ignore"):
            return Rng(int(_mix(base + _GAMMA)[0]))

    def random(self, size=None) -> np.ndarray | float:
        """Uniform doubles on [0, 1) with 53 bits of resolution."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return low + (high - low) * self.random(size)

    def normal(self, size=None, loc=0.0, scale=1.0):
        """Gaussian draws via the Box-Muller transform (two uniforms per pair)."""
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u = self.random(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1]
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        z = loc + scale * z
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def integers(self, low: int, high: int, size=None):
        """Integers uniform on [low, high) (floor of a scaled 53-bit uniform)."""
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        u = self.random(1 if size is None else size)
        out = low + np.floor(np.asarray(u) * (high - low)).astype(np.int64)
        if size is None:
            return int(out.reshape(-1)[0])
        return out

    def permutation(self, n: int) -> np.ndarray:
        """Random permutation of ``range(n)`` (stable argsort of random keys)."""
        return np.argsort(self.next_u64(n), kind="stable")
