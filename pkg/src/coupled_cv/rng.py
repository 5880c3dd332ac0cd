"""Seed derivation and per-lane random streams.

Every replicate ("lane") owns a PCG64 generator whose seed is a SplitMix64
mix of ``(root_seed, replicate_index)``. Kernels draw through a stream object
that addresses lanes by index, so a lane consumes the same draws whether it
is simulated alone, in a block, or inside a worker process.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

_MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def splitmix64_finalizer(z: int) -> int:
    """SplitMix64 output mixing function on a 64-bit integer."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def replicate_seed(root_seed: int, index: int) -> int:
    """Seed of replicate ``index``: the ``index``-th SplitMix64 output from ``root_seed``.

    ``seed = finalizer(root_seed + (index + 1) * 0x9E3779B97F4A7C15 mod 2**64)``
    """
    if index < 0:
        raise ValueError("replicate index must be nonnegative")
    return splitmix64_finalizer(root_seed + (index + 1) * GOLDEN_GAMMA)


def replicate_seeds(root_seed: int, n: int, start: int = 0) -> list[int]:
    return [replicate_seed(root_seed, i) for i in range(start, start + n)]


def make_generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


class LaneStreams:
    """One independent generator per lane.

    Draws for a subset of lanes are taken lane by lane, in lane order, so each
    lane's sequence is independent of which other lanes are active.
    """

    def __init__(self, generators: Sequence[np.random.Generator]):
        self.generators = list(generators)

    @classmethod
    def from_seeds(cls, seeds: Sequence[int]) -> "LaneStreams":
        return cls([make_generator(s) for s in seeds])

    def __len__(self) -> int:
        return len(self.generators)

    def normal(self, lanes: np.ndarray, d: int) -> np.ndarray:
        gens = self.generators
        out = np.empty((len(lanes), d))
        for row, i in enumerate(lanes):
            out[row] = gens[i].standard_normal(d)
        return out

    def uniform(self, lanes: np.ndarray) -> np.ndarray:
        gens = self.generators
        return np.fromiter((gens[i].random() for i in lanes), dtype=float, count=len(lanes))


class SharedStream:
    """All lanes share one generator; draws are vectorized.

    Faster than :class:`LaneStreams` but the draws a lane receives depend on
    the batch it belongs to. Used for oracle Monte Carlo, where batches are
    fixed-size chunks with their own derived seeds.
    """

    def __init__(self, generator: np.random.Generator, n_lanes: int):
        self.generator = generator
        self.n_lanes = n_lanes

    def __len__(self) -> int:
        return self.n_lanes

    def normal(self, lanes: np.ndarray, d: int) -> np.ndarray:
        return self.generator.standard_normal((len(lanes), d))

    def uniform(self, lanes: np.ndarray) -> np.ndarray:
        return self.generator.random(len(lanes))


def as_streams(rng) -> LaneStreams | SharedStream:
    """Wrap a single generator (or seed) as a one-lane stream."""
    if isinstance(rng, (LaneStreams, SharedStream)):
        return rng
    if isinstance(rng, np.random.Generator):
        return LaneStreams([rng])
    return LaneStreams([make_generator(int(rng))])
