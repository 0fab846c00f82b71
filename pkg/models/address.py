"""
Address matrix A for the Neural Bloom Filter.

In the fixed modes A is a sample of unit normals that training never
touches. Seeded mode keeps only a list of 16-bit seeds; seed i regenerates
the slot vectors 16*i .. 16*i + 15 with a counter-based generator, so the
matrix can be rebuilt identically on any platform.
"""
import logging
import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import chisquare

from core.params import ParamStore

logger = logging.getLogger(__name__)

ADDRESS_MODES = ('trainable', 'gaussian_fixed', 'seeded')
ROWS_PER_SEED = 16
SEED_LIMIT = 1 << 16


def regenerate_address_rows(seed: int, query_dim: int) -> np.ndarray:
    """The 16 slot vectors (16, query_dim) keyed by a 16-bit seed"""
    if not 0 <= seed < SEED_LIMIT:
        raise ValueError(f"address seed {seed} is not a 16-bit integer")
    generator = np.random.Generator(np.random.Philox(key=seed))
    return generator.standard_normal((ROWS_PER_SEED, query_dim))


def matrix_from_seeds(seeds, query_dim: int, slots: int) -> np.ndarray:
    """Assemble A (query_dim, slots) from its seed list"""
    rows = np.concatenate([regenerate_address_rows(int(seed), query_dim) for seed in seeds], axis=0)
    if rows.shape[0] < slots:
        raise ValueError(f"{len(seeds)} seeds cover {rows.shape[0]} slots, need {slots}")
    return rows[:slots].T.copy()


def draw_seeds(slots: int, rng: np.random.Generator) -> np.ndarray:
    count = math.ceil(slots / ROWS_PER_SEED)
    return rng.choice(SEED_LIMIT, size=count, replace=False).astype(np.uint16)


def seeds_to_bytes(seeds) -> bytes:
    return struct.pack(f'<{len(seeds)}H', *[int(s) for s in seeds])


def seeds_from_bytes(data: bytes) -> np.ndarray:
    if len(data) % 2:
        raise ValueError(f"seed list has odd byte length {len(data)}")
    return np.array(struct.unpack(f'<{len(data) // 2}H', data), dtype=np.uint16)


@dataclass
class AddressMatrix:
    """A (query_dim x slots) plus how it was produced"""
    matrix: np.ndarray
    mode: str
    seeds: Optional[np.ndarray] = None

    @property
    def trainable(self) -> bool:
        return self.mode == 'trainable'

    @classmethod
    def build(cls, mode: str, query_dim: int, slots: int, rng: np.random.Generator) -> 'AddressMatrix':
        if mode == 'trainable':
            return cls(rng.normal(0.0, 1.0 / math.sqrt(query_dim), size=(query_dim, slots)), mode)
        if mode == 'gaussian_fixed':
            return cls(rng.standard_normal((query_dim, slots)), mode)
        if mode == 'seeded':
            seeds = draw_seeds(slots, rng)
            return cls(matrix_from_seeds(seeds, query_dim, slots), mode, seeds)
        raise ValueError(f"unknown address mode {mode!r}; expected one of {ADDRESS_MODES}")

    def register(self, store: ParamStore, name: str = 'address'):
        store.add(name, self.matrix, trainable=self.trainable)
        if self.seeds is not None:
            store.add(f"{name}.seeds", self.seeds.astype(np.float64), trainable=False)

    @classmethod
    def from_store(cls, store: ParamStore, mode: str, name: str = 'address') -> 'AddressMatrix':
        seeds = None
        if f"{name}.seeds" in store:
            seeds = store[f"{name}.seeds"].astype(np.uint16)
        return cls(np.array(store[name]), mode, seeds)


def slot_histogram(queries: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Counts of the top-1 slot selected by each query row"""
    winners = np.argmax(queries @ matrix, axis=1)
    return np.bincount(winners, minlength=matrix.shape[1])


def slot_histogram_pvalue(queries: np.ndarray, matrix: np.ndarray) -> float:
    """Chi-square p-value of the top-1 slot histogram against a uniform distribution"""
    counts = slot_histogram(queries, matrix)
    return float(chisquare(counts).pvalue)
