"""Hierarchical, reproducible random streams.

A stream is a (seed, path) pair. The path is a tuple of non-negative
integers such as (stage, purpose, level, block). Two streams with the same
seed and path produce bit-identical draws; streams with different paths are
independent (numpy ``SeedSequence`` spawn keys).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# purpose tags used in stream paths
RADIUS = 0
MLMC = 1
MALA = 2


@dataclass(frozen=True)
class RngStream:
    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if int(self.seed) < 0 or int(self.seed) >= 2**64:
            raise ValueError(f"seed must be a 64-bit non-negative integer, got {self.seed}")
        if any(int(p) < 0 for p in self.path):
            raise ValueError(f"path entries must be non-negative, got {self.path}")

    def child(self, *idx: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(int(i) for i in idx))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(ss))


def as_generator(rng) -> np.random.Generator:
    """Accept an RngStream, a Generator or an int seed."""
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, (int, np.integer)):
        return np.random.default_rng(rng)
    raise TypeError(f"cannot build a generator from {type(rng).__name__}")
