"""Per-chain random streams.

Stream derivation rule: chain ``k`` of an experiment seeded with ``seed`` draws
purpose ``p`` from ``Philox(SeedSequence(seed, spawn_key=(k, p)))``.  The
stream therefore depends only on ``(seed, chain index, purpose)``: it does not
change with the number of chains, grid points, or worker processes.
"""
from __future__ import annotations

from typing import Dict, Sequence

import numpy as np

PURPOSES = {"refresh": 0, "gradient_noise": 1, "batch": 2, "langevin": 3, "init": 4, "bootstrap": 5}


def chain_generator(seed: int, chain: int, purpose: str) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(chain), PURPOSES[purpose]))
    return np.random.Generator(np.random.Philox(ss))


class ChainStream:
    """Stacked standard-normal source for a batch of chains.

    ``standard_normal((n_chains, d))`` returns row ``k`` from chain ``k``'s own
    generator.  Draws are produced in blocks to amortise per-call overhead,
    which makes a row's values independent of how many rows share the batch.
    """

    def __init__(self, seed: int, chains: Sequence[int], purpose: str, block: int = 512):
        self.seed = int(seed)
        self.chains = [int(c) for c in chains]
        self.purpose = purpose
        self.block = block
        self._gens = [chain_generator(seed, c, purpose) for c in self.chains]
        self._buffers: Dict[tuple, list] = {}

    @property
    def n_chains(self) -> int:
        return len(self.chains)

    def standard_normal(self, shape):
        shape = tuple(np.atleast_1d(shape))
        if shape[0] != self.n_chains:
            raise ValueError(f"leading axis must be {self.n_chains}, got {shape}")
        tail = shape[1:]
        buf = self._buffers.get(tail)
        if buf is None or buf[1] >= self.block:
            data = np.stack([g.standard_normal((self.block,) + tail) for g in self._gens], axis=1)
            buf = [data, 0]
            self._buffers[tail] = buf
        out = buf[0][buf[1]]
        buf[1] += 1
        return out

    def generator(self, i: int) -> np.random.Generator:
        return self._gens[i]


class ChainRNG:
    """Bundle of per-purpose :class:`ChainStream` objects for one batch of chains."""

    def __init__(self, seed: int, chains: Sequence[int], block: int = 512):
        self.seed = int(seed)
        self.chains = list(chains)
        self.block = block
        self._streams: Dict[str, ChainStream] = {}

    @property
    def n_chains(self) -> int:
        return len(self.chains)

    def stream(self, purpose: str) -> ChainStream:
        s = self._streams.get(purpose)
        if s is None:
            s = self._streams[purpose] = ChainStream(self.seed, self.chains, purpose, self.block)
        return s


def as_stream(rng, purpose: str):
    """Resolve ``rng`` to something with ``standard_normal(shape)``."""
    if isinstance(rng, ChainRNG):
        return rng.stream(purpose)
    return rng
