"""
Latency and throughput of inserts and queries for neural and classical artifacts
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from core.params import ParamStore
from filters.bloom import BloomFilter
from filters.cuckoo import CuckooFilter
from models.base import FamiliarityModel, item_count
from utils.clock import median_seconds
from utils.io import item_keys, write_csv

logger = logging.getLogger(__name__)

TIMING_COLUMNS = ('artifact', 'op', 'batch', 'latency_ms', 'throughput_per_s', 'workers')
DEFAULT_BATCHES = (1, 10_000)


@dataclass
class TimingTarget:
    """insert(items) and query(items) closures over a built artifact"""
    name: str
    insert: Callable
    query: Callable


def model_target(name: str, model: FamiliarityModel, store: ParamStore, stored) -> TimingTarget:
    state = model.write_state(store, stored)
    return TimingTarget(
        name,
        insert=lambda items: model.write_state(store, items),
        query=lambda items: model.query(store, state, items),
    )


def filter_target(kind: str, stored, epsilon: float, hash_seed: int = 0) -> TimingTarget:
    stored_keys = item_keys(stored)

    def fresh(capacity: int):
        if kind == 'bloom':
            return BloomFilter.for_capacity(capacity, epsilon, hash_seed)
        return CuckooFilter.for_capacity(capacity, epsilon, hash_seed=hash_seed)

    built = fresh(max(len(stored_keys), 1))
    for key in stored_keys:
        built.insert(key)

    def insert(items):
        keys = item_keys(items)
        target = fresh(max(len(keys), 1))
        for key in keys:
            target.insert(key)

    def query(items):
        return [built.query(key) for key in item_keys(items)]

    return TimingTarget(kind, insert, query)


def _take(items, batch: int, rng: np.random.Generator):
    ids = rng.integers(0, item_count(items), size=batch)
    if isinstance(items, np.ndarray):
        return items[ids]
    return [items[i] for i in ids]


def _chunks(items, parts: int):
    bounds = np.linspace(0, item_count(items), parts + 1).astype(int)
    return [items[start:stop] for start, stop in zip(bounds[:-1], bounds[1:]) if stop > start]


def timing_bench(targets: Sequence[TimingTarget], pool_items, batch_sizes: Sequence[int] = DEFAULT_BATCHES,
                 repeats: int = 5, warmup: int = 1, workers: int = 1, seed: int = 0,
                 path: Optional[Path] = None) -> List[Dict]:
    """Median of ``repeats`` timed runs after ``warmup`` discarded runs.

    Batch 1 is timed on a single worker; larger batches are split across
    ``workers`` threads for throughput.
    """
    rng = np.random.default_rng(seed)
    batches = {batch: _take(pool_items, batch, rng) for batch in batch_sizes}
    rows = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for target in targets:
            medians = {}
            for op in ('insert', 'query'):
                fn = getattr(target, op)
                for batch, items in batches.items():
                    used = workers if (pool is not None and batch > 1) else 1
                    if used > 1:
                        parts = _chunks(items, used)
                        seconds = median_seconds(lambda: list(pool.map(fn, parts)), repeats, warmup)
                    else:
                        seconds = median_seconds(lambda: fn(items), repeats, warmup)
                    medians[(op, batch)] = seconds
                    rows.append(_row(target.name, op, batch, seconds, used))
                    logger.info(f"{target.name} {op} batch {batch}: {seconds * 1000:.3f} ms")
            if (('insert', 1) in medians) and (('query', 1) in medians):
                combined = medians[('insert', 1)] + medians[('query', 1)]
                rows.append(_row(target.name, 'insert+query', 1, combined, 1))
    finally:
        if pool is not None:
            pool.shutdown()
    if path is not None:
        write_csv(path, TIMING_COLUMNS, rows)
    return rows


def _row(name: str, op: str, batch: int, seconds: float, workers: int) -> Dict:
    seconds = max(seconds, 1e-12)
    return {
        'artifact': name,
        'op': op,
        'batch': batch,
        'latency_ms': seconds * 1000.0,
        'throughput_per_s': batch / seconds,
        'workers': workers,
    }
