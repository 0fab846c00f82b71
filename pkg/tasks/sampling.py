"""
Episode samplers: a storage set S plus labelled membership queries
"""
import logging
from dataclasses import dataclass
from typing import Iterator, List

import numpy as np

from tasks.sources import DatasetError, DatasetSource, Items
from utils.io import item_keys

logger = logging.getLogger(__name__)

TASK_KINDS = ('class_based', 'exponential', 'uniform', 'database_range')


@dataclass
class TaskSpec:
    kind: str = 'class_based'
    n: int = 50
    t: int = 0
    positive_fraction: float = 0.5
    decay: float = 0.999
    n_min: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.n < 1:
            raise ValueError(f"task n must be >= 1, got {self.n}")
        if self.t < 0:
            raise ValueError(f"task t must be >= 1 (0 means t = n), got {self.t}")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ValueError(f"positive_fraction must lie in [0, 1], got {self.positive_fraction}")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must lie in (0, 1], got {self.decay}")
        if not 0 <= self.n_min <= self.n:
            raise ValueError(f"n_min must lie in [0, {self.n}], got {self.n_min}")

    @property
    def queries(self) -> int:
        return self.t or self.n

    @property
    def smallest_set(self) -> int:
        return self.n_min or self.n

    @property
    def expected_negatives(self) -> int:
        """Negative queries per episode; exponential and range queries are bounded by t"""
        if self.kind in ('class_based', 'uniform'):
            return self.queries - int(round(self.queries * self.positive_fraction))
        return self.queries


@dataclass
class Episode:
    storage: Items
    queries: Items
    labels: np.ndarray
    storage_ids: np.ndarray
    query_ids: np.ndarray

    @property
    def n(self) -> int:
        return len(self.storage_ids)

    @property
    def t(self) -> int:
        return len(self.query_ids)

    def membership(self) -> np.ndarray:
        """1.0 where a query's value equals some stored item's value"""
        return value_membership(self.storage, self.queries)

    @property
    def positives(self) -> Items:
        return _select(self.queries, self.labels == 1.0)

    @property
    def negatives(self) -> Items:
        return _select(self.queries, self.labels == 0.0)


def _select(items: Items, mask: np.ndarray) -> Items:
    if isinstance(items, np.ndarray):
        return items[mask]
    return [item for item, keep in zip(items, mask) if keep]


def value_membership(storage: Items, queries: Items) -> np.ndarray:
    stored = set(item_keys(storage))
    return np.array([key in stored for key in item_keys(queries)], dtype=np.float64)


def _build(source: DatasetSource, storage_ids: np.ndarray, query_ids: np.ndarray,
           rng: np.random.Generator, shuffle: bool = True) -> Episode:
    if shuffle:
        query_ids = rng.permutation(query_ids)
    storage, queries = source.take(storage_ids), source.take(query_ids)
    # Items with equal values are the same member, whatever their ids
    labels = value_membership(storage, queries)
    return Episode(storage, queries, labels,
                   np.asarray(storage_ids, dtype=np.int64), np.asarray(query_ids, dtype=np.int64))


def _mixed_queries(rng: np.random.Generator, storage_ids: np.ndarray, negative_pool: np.ndarray,
                   t: int, positive_fraction: float) -> np.ndarray:
    positives = int(round(t * positive_fraction)) if len(negative_pool) else t
    chosen = [rng.choice(storage_ids, size=positives, replace=True)]
    if t - positives:
        chosen.append(rng.choice(negative_pool, size=t - positives, replace=True))
    return np.concatenate(chosen).astype(np.int64)


def sample_class_based(rng: np.random.Generator, source: DatasetSource, n: int, t: int,
                       positive_fraction: float = 0.5) -> Episode:
    """S from one random class; negatives from the other classes"""
    members = source.class_members()
    eligible = [label for label, ids in members.items() if len(ids) >= n]
    if not eligible:
        largest = max(len(ids) for ids in members.values())
        raise DatasetError(f"no class holds {n} items (largest has {largest})")
    label = eligible[rng.integers(len(eligible))]
    storage_ids = rng.choice(members[label], size=n, replace=False)
    if len(members) > 1:
        pool = np.flatnonzero(source.labels != label)
    else:
        pool = np.setdiff1d(members[label], storage_ids)
    return _build(source, storage_ids, _mixed_queries(rng, storage_ids, pool, t, positive_fraction), rng)


def exponential_weights(size: int, permutation: np.ndarray, decay: float) -> np.ndarray:
    """p(permutation[i]) proportional to decay^i"""
    log_weights = np.arange(size) * np.log(decay)
    weights = np.exp(log_weights - log_weights.max())
    probabilities = np.empty(size)
    probabilities[permutation] = weights / weights.sum()
    return probabilities


def sample_exponential(rng: np.random.Generator, source: DatasetSource, n: int, t: int,
                       decay: float = 0.999) -> Episode:
    """S weighted towards the head of a fixed permutation; queries uniform over the source"""
    if source.size < n:
        raise DatasetError(f"source has {source.size} items, need {n}")
    probabilities = exponential_weights(source.size, source.permutation, decay)
    if np.count_nonzero(probabilities) < n:
        raise DatasetError(f"decay {decay} leaves fewer than {n} items with nonzero weight")
    storage_ids = rng.choice(source.size, size=n, replace=False, p=probabilities)
    query_ids = rng.integers(0, source.size, size=t)
    return _build(source, storage_ids, query_ids, rng, shuffle=False)


def sample_uniform(rng: np.random.Generator, source: DatasetSource, n: int, t: int,
                   positive_fraction: float = 0.5) -> Episode:
    if source.size < n:
        raise DatasetError(f"source has {source.size} items, need {n}")
    storage_ids = rng.choice(source.size, size=n, replace=False)
    pool = np.setdiff1d(np.arange(source.size), storage_ids)
    return _build(source, storage_ids, _mixed_queries(rng, storage_ids, pool, t, positive_fraction), rng)


def sample_database_range(rng: np.random.Generator, universe: DatasetSource, n: int, t: int) -> Episode:
    """A contiguous run of the sorted universe; queries uniform over the universe"""
    if universe.size < n:
        raise DatasetError(f"universe has {universe.size} tokens, need {n}")
    start = int(rng.integers(0, universe.size - n + 1))
    storage_ids = np.arange(start, start + n)
    query_ids = rng.integers(0, universe.size, size=t)
    return _build(universe, storage_ids, query_ids, rng, shuffle=False)


def sample_episode(rng: np.random.Generator, source: DatasetSource, spec: TaskSpec) -> Episode:
    n = spec.n
    if spec.n_min and spec.n_min < spec.n:
        n = int(rng.integers(spec.n_min, spec.n + 1))
    t = spec.queries
    if spec.kind == 'class_based':
        return sample_class_based(rng, source, n, t, spec.positive_fraction)
    if spec.kind == 'exponential':
        return sample_exponential(rng, source, n, t, spec.decay)
    if spec.kind == 'uniform':
        return sample_uniform(rng, source, n, t, spec.positive_fraction)
    return sample_database_range(rng, source, n, t)


def episode_rngs(seed, count: int) -> List[np.random.Generator]:
    """Independent per-episode generators split from one seed"""
    sequence = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(child) for child in sequence.spawn(count)]


def sample_episodes(seed, source: DatasetSource, spec: TaskSpec, count: int) -> List[Episode]:
    return [sample_episode(rng, source, spec) for rng in episode_rngs(seed, count)]


def episode_stream(seed, source: DatasetSource, spec: TaskSpec) -> Iterator[Episode]:
    """Endless deterministic episode sequence; child streams spawned one at a time"""
    sequence = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    while True:
        (child,) = sequence.spawn(1)
        yield sample_episode(np.random.default_rng(child), source, spec)
