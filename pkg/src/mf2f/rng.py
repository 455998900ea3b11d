"""Counter-based pseudo-random generator.

All stochastic pieces of the package (noise synthesis, weight init, frame
sampling) draw from this generator rather than from numpy's global state, so
a run is a pure function of the seeds written into its manifest.  The core
is the SplitMix64 mixing function applied to ``seed + k * GAMMA`` for a
running counter ``k``: stateless apart from the counter, trivially
reproducible, and cheap to vectorise with uint64 numpy arrays.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer: a bijective avalanche on uint64."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Mix extra integer keys into a seed, yielding an independent stream.

    Used to give every frame / every draw site its own sub-seed so that the
    sequence consumed by one site cannot shift another.
    """
    z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    for k in keys:
        with np.errstate(over="ignore"):
            z = _mix64(z + _GAMMA + np.uint64(k & 0xFFFFFFFFFFFFFFFF))
    return int(z)


class CounterRng:
    """Deterministic random stream addressed by (seed, counter).

    Draws advance an internal counter; two generators built from the same
    seed produce identical sequences on any platform because every value is
    a pure function of seed and counter.
    """

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    @property
    def seed(self) -> int:
        return int(self._seed)

    def derive(self, *keys: int) -> "CounterRng":
        """A fresh generator whose stream is independent of this one."""
        return CounterRng(derive_seed(int(self._seed), *keys))

    def raw64(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words."""
        idx = np.arange(self._counter, self._counter + n, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix64(self._seed + idx * _GAMMA)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform doubles in [low, high) with 53 random mantissa bits."""
        n = 1 if shape is None else int(np.prod(shape))
        u = (self.raw64(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        out = low + u * (high - low)
        return float(out[0]) if shape is None else out.reshape(shape)

    def normal(self, shape=None) -> np.ndarray:
        """Standard normals via Box-Muller (both branches consumed)."""
        n = 1 if shape is None else int(np.prod(shape))
        m = (n + 1) // 2
        # u1 in (0, 1] so the log is finite.
        u1 = ((self.raw64(m) >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0**-53)
        u2 = (self.raw64(m) >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        return float(z[0]) if shape is None else z.reshape(shape)

    def randint(self, low: int, high: int, shape=None):
        """Integers in [low, high). Ranges are tiny next to 2**53, so the
        floor-of-uniform construction is effectively unbiased."""
        u = self.uniform(shape)
        out = np.floor(low + u * (high - low))
        if shape is None:
            return int(out)
        return out.astype(np.int64)

    def shuffle(self, items: list) -> list:
        """Fisher-Yates; returns a new list, input untouched."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.randint(0, i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def poisson(self, lam: np.ndarray) -> np.ndarray:
        """Poisson counts for an array of rates.

        Rates below 30 use Knuth's product-of-uniforms loop; larger rates
        use the rounded normal approximation round(max(0, lam + sqrt(lam)*z)),
        whose moment error is negligible at that scale.  lam == 0 yields 0.
        """
        lam = np.asarray(lam, dtype=np.float64)
        if np.any(lam < 0):
            raise ValueError("poisson rate must be non-negative")
        flat = lam.ravel()
        out = np.zeros(flat.shape, dtype=np.int64)

        small = np.flatnonzero(flat < 30.0)
        if small.size:
            L = np.exp(-flat[small])
            p = np.ones(small.size)
            k = np.zeros(small.size, dtype=np.int64)
            alive = np.flatnonzero(p > L)
            while alive.size:
                p[alive] *= self.uniform(alive.size)
                keep = p[alive] > L[alive]
                k[alive[keep]] += 1
                alive = alive[keep]
            out[small] = k

        big = np.flatnonzero(flat >= 30.0)
        if big.size:
            z = self.normal(big.size)
            approx = np.rint(np.maximum(0.0, flat[big] + np.sqrt(flat[big]) * z))
            out[big] = approx.astype(np.int64)

        return out.reshape(lam.shape)
