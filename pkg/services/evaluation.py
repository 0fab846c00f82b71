"""
Measurement harness: threshold calibration, empirical error rates with
confidence intervals, backup-filter composites and total-space accounting.

A neural model answers "present" when its logit is at least the calibrated
threshold. Its false negatives on a stored set go into a small backup Bloom
filter so the composite never misses a stored item. At a target false
positive rate alpha both halves are run at alpha / 2.
"""
import logging
import math
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import islice
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from core.params import ParamStore
from filters.bloom import BloomFilter
from filters.cuckoo import CuckooFilter
from filters.sizing import analytical_fpr, bloom_size_for, cuckoo_bits
from models.base import PRECISIONS, FamiliarityModel, item_count
from tasks.sampling import Episode, TaskSpec, episode_stream
from tasks.sources import DatasetSource
from utils.io import item_keys
from utils.stats import wilson_interval

logger = logging.getLogger(__name__)

DEFAULT_QUERY_BUDGET = 50_000
MIN_QUERY_BUDGET = 1_000
MIN_CALIBRATION_NEGATIVES = 10_000
CALIBRATION_EPISODE_SLACK = 10
FILTER_KINDS = ('bloom', 'cuckoo')


class CalibrationError(ValueError):
    """Raised when no finite threshold reaches the target false-positive rate"""


def episode_scores(model: FamiliarityModel, store: ParamStore,
                   episodes: Iterable[Episode]) -> Tuple[np.ndarray, np.ndarray]:
    """Logits of positive and negative queries pooled over episodes"""
    positives, negatives = [], []
    for episode in episodes:
        state = model.write_state(store, episode.storage)
        logits = model.query(store, state, episode.queries)
        positives.append(logits[episode.labels == 1.0])
        negatives.append(logits[episode.labels == 0.0])
    return np.concatenate(positives or [np.zeros(0)]), np.concatenate(negatives or [np.zeros(0)])


def episodes_for_negatives(episodes: Iterable[Episode], min_negatives: int,
                           max_episodes: Optional[int] = None) -> List[Episode]:
    """Draw episodes until they hold at least ``min_negatives`` negative queries.

    With ``max_episodes`` set, running out of draws first raises CalibrationError.
    """
    chosen, negatives = [], 0
    for episode in episodes:
        chosen.append(episode)
        negatives += int(np.count_nonzero(episode.labels == 0.0))
        if negatives >= min_negatives:
            break
        if max_episodes is not None and len(chosen) >= max_episodes:
            raise CalibrationError(
                f"only {negatives} negative queries in {len(chosen)} episodes, need {min_negatives}")
    return chosen


def calibration_episode_cap(task: TaskSpec, min_negatives: int) -> int:
    expected = task.expected_negatives
    if expected == 0:
        raise CalibrationError(
            f"{task.kind} task with positive_fraction={task.positive_fraction} has no negative queries")
    return CALIBRATION_EPISODE_SLACK * int(math.ceil(min_negatives / expected))


def calibration_episodes(seed, source: DatasetSource, task: TaskSpec, min_negatives: int) -> List[Episode]:
    """Episodes from a seeded stream holding ``min_negatives`` negatives, or CalibrationError"""
    cap = calibration_episode_cap(task, min_negatives)
    return episodes_for_negatives(episode_stream(seed, source, task), min_negatives, cap)


def threshold_for_fpr(negatives: np.ndarray, epsilon: float) -> float:
    """Lowest threshold tau with mean(negatives >= tau) <= epsilon"""
    negatives = np.sort(np.asarray(negatives, dtype=np.float64))[::-1]
    allowed = int(math.floor(epsilon * negatives.size))
    if allowed >= negatives.size:
        return float(negatives[-1])
    return float(np.nextafter(negatives[allowed], np.inf))


def rates_at_fnr_budget(positives: np.ndarray, negatives: np.ndarray,
                        fnr_budget: float) -> Tuple[float, float, float]:
    """(tau, fnr, fpr) at the highest threshold whose FNR stays within the budget"""
    if positives.size == 0:
        return math.inf, 0.0, 0.0
    ordered = np.sort(positives)
    tau = float(ordered[int(math.floor(fnr_budget * ordered.size))])
    fnr = float(np.mean(positives < tau))
    fpr = float(np.mean(negatives >= tau)) if negatives.size else 0.0
    return tau, fnr, fpr


def calibrate_threshold(model: FamiliarityModel, store: ParamStore, episodes: Iterable[Episode],
                        epsilon: float, min_negatives: int = MIN_CALIBRATION_NEGATIVES) -> float:
    """Operating point: the model says "present" when logit >= tau"""
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    _, negatives = episode_scores(model, store, episodes)
    if negatives.size < min_negatives:
        raise CalibrationError(
            f"calibration needs at least {min_negatives} negative queries, got {negatives.size}")
    tau = threshold_for_fpr(negatives, epsilon)
    if not math.isfinite(tau):
        raise CalibrationError(f"target FPR {epsilon} unattainable: threshold {tau} is not finite")
    logger.info(f"Calibrated threshold {tau:.6f} for FPR {epsilon} over {negatives.size} negatives")
    return tau


@dataclass
class CalibratedModel:
    model: FamiliarityModel
    store: ParamStore
    threshold: float
    precision: int = 32

    def __post_init__(self):
        if not math.isfinite(self.threshold):
            raise CalibrationError(f"threshold {self.threshold} is not finite")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}, got {self.precision}")

    def write(self, items) -> np.ndarray:
        return self.model.write_state(self.store, items)

    def predict(self, state: np.ndarray, queries) -> np.ndarray:
        return self.model.query(self.store, state, queries) >= self.threshold


class CompositeFilter:
    """Calibrated model plus a backup Bloom filter of its false negatives"""

    def __init__(self, calibrated: CalibratedModel, state: np.ndarray, backup: BloomFilter,
                 n_fn: int, n: int, delta: float):
        self.calibrated = calibrated
        self.state = state
        self.backup = backup
        self.n_fn = n_fn
        self.n = n
        self.delta = delta

    def query(self, items) -> np.ndarray:
        if item_count(items) == 0:
            return np.zeros(0, dtype=bool)
        model_says = self.calibrated.predict(self.state, items)
        backup_says = np.array([self.backup.query(key) for key in item_keys(items)])
        return model_says | backup_says

    def state_bits(self) -> int:
        return self.calibrated.model.state_bits(self.state, self.calibrated.precision)


def build_composite(calibrated: CalibratedModel, stored, delta: float, hash_seed: int = 0) -> CompositeFilter:
    state = calibrated.write(stored)
    keys = item_keys(stored)
    misses = ~calibrated.predict(state, stored) if keys else np.zeros(0, dtype=bool)
    n_fn = int(np.count_nonzero(misses))
    backup = BloomFilter.for_capacity(max(n_fn, 1), delta, hash_seed)
    backup.insert_many(key for key, missed in zip(keys, misses) if missed)
    composite = CompositeFilter(calibrated, state, backup, n_fn, len(keys), delta)
    if keys and not composite.query(stored).all():
        raise RuntimeError("composite filter lost a stored item")
    logger.debug(f"Composite over {len(keys)} items: {n_fn} false negatives in backup of {backup.m} bits")
    return composite


@dataclass
class SpaceReport:
    n: int
    target_alpha: float
    precision: int
    state_bits: float
    backup_bits: float
    total_bits: float
    n_fn: float
    measured_fpr: Optional[float] = None
    fpr_ci: Optional[Tuple[float, float]] = None
    measured_fnr: Optional[float] = None
    model_fnr: Optional[float] = None
    memory_utilization: Optional[float] = None
    classical: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        report = asdict(self)
        if self.fpr_ci is not None:
            report['fpr_ci'] = list(self.fpr_ci)
        return report


def classical_rows(n: int, alpha: float) -> Dict[str, float]:
    m, k = bloom_size_for(n, alpha)
    return {
        'bloom_bits': m,
        'bloom_k': k,
        'bloom_analytical_fpr': analytical_fpr(m, n, k),
        'cuckoo_bits': cuckoo_bits(n, alpha),
    }


def total_space(composite: CompositeFilter, alpha: float) -> SpaceReport:
    if not math.isclose(composite.delta, alpha / 2.0):
        raise ValueError(f"composite built at delta={composite.delta}, expected alpha/2={alpha / 2.0}")
    state_bits = composite.state_bits()
    backup_bits = composite.backup.size_bits
    return SpaceReport(
        n=composite.n,
        target_alpha=alpha,
        precision=composite.calibrated.precision,
        state_bits=state_bits,
        backup_bits=backup_bits,
        total_bits=state_bits + backup_bits,
        n_fn=composite.n_fn,
        classical=classical_rows(max(composite.n, 1), alpha),
    )


class MembershipOracle(ABC):
    """Anything that can store an episode's set and answer its queries"""

    name = 'oracle'

    @abstractmethod
    def predict(self, episode: Episode) -> np.ndarray:
        ...


class ModelOracle(MembershipOracle):
    def __init__(self, calibrated: CalibratedModel, name: Optional[str] = None):
        self.calibrated = calibrated
        self.name = name or calibrated.model.kind

    def predict(self, episode):
        return self.calibrated.predict(self.calibrated.write(episode.storage), episode.queries)


class CompositeOracle(MembershipOracle):
    def __init__(self, calibrated: CalibratedModel, delta: float, name: Optional[str] = None):
        self.calibrated = calibrated
        self.delta = delta
        self.name = name or f"{calibrated.model.kind}+backup"

    def predict(self, episode):
        return build_composite(self.calibrated, episode.storage, self.delta).query(episode.queries)


class FilterOracle(MembershipOracle):
    """A fresh classical filter sized for each episode's set"""

    def __init__(self, kind: str, epsilon: float, hash_seed: int = 0):
        if kind not in FILTER_KINDS:
            raise ValueError(f"unknown filter kind {kind!r}; expected one of {FILTER_KINDS}")
        self.kind = kind
        self.name = kind
        self.epsilon = epsilon
        self.hash_seed = hash_seed

    def build(self, stored):
        keys = item_keys(stored)
        if self.kind == 'bloom':
            filt = BloomFilter.for_capacity(max(len(keys), 1), self.epsilon, self.hash_seed)
            filt.insert_many(keys)
            return filt
        filt = CuckooFilter.for_capacity(max(len(keys), 1), self.epsilon, hash_seed=self.hash_seed)
        for key in keys:
            if not filt.insert(key):
                raise RuntimeError(f"cuckoo filter sized for {len(keys)} items rejected an insert")
        return filt

    def predict(self, episode):
        filt = self.build(episode.storage)
        return np.array([filt.query(key) for key in item_keys(episode.queries)], dtype=bool)


@dataclass
class RateReport:
    fpr: float
    fnr: float
    fpr_ci: Tuple[float, float]
    fnr_ci: Tuple[float, float]
    negatives: int
    positives: int
    queries: int
    episodes: int

    def to_dict(self) -> Dict:
        report = asdict(self)
        report['fpr_ci'], report['fnr_ci'] = list(self.fpr_ci), list(self.fnr_ci)
        return report


def measure_fpr_fnr(oracle: MembershipOracle, episodes: Iterable[Episode],
                    query_budget: int = DEFAULT_QUERY_BUDGET, workers: int = 1) -> RateReport:
    """Empirical FPR/FNR over up to ``query_budget`` queries with Wilson 99% intervals"""
    if query_budget < MIN_QUERY_BUDGET:
        raise ValueError(f"query budget must be >= {MIN_QUERY_BUDGET}, got {query_budget}")
    false_pos = false_neg = negatives = positives = used = count = 0
    iterator = iter(episodes)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        while used < query_budget:
            chunk = list(islice(iterator, max(1, workers)))
            if not chunk:
                break
            predictions = list(pool.map(oracle.predict, chunk)) if pool else [oracle.predict(e) for e in chunk]
            for episode, predicted in zip(chunk, predictions):
                take = min(query_budget - used, episode.t)
                if take <= 0:
                    break
                labels = episode.labels[:take] == 1.0
                predicted = np.asarray(predicted[:take], dtype=bool)
                false_pos += int(np.count_nonzero(predicted & ~labels))
                false_neg += int(np.count_nonzero(~predicted & labels))
                positives += int(np.count_nonzero(labels))
                negatives += int(np.count_nonzero(~labels))
                used += take
                count += 1
    finally:
        if pool is not None:
            pool.shutdown()
    fpr = false_pos / negatives if negatives else 0.0
    fnr = false_neg / positives if positives else 0.0
    logger.info(f"{oracle.name}: fpr {fpr:.5f} fnr {fnr:.5f} over {used} queries in {count} episodes")
    return RateReport(fpr, fnr, wilson_interval(false_pos, negatives), wilson_interval(false_neg, positives),
                      negatives, positives, used, count)


def evaluate_space(model: FamiliarityModel, store: ParamStore, calibration: Iterable[Episode],
                   test_episodes: List[Episode], alpha: float, precision: int = 32,
                   query_budget: int = DEFAULT_QUERY_BUDGET, min_negatives: int = MIN_CALIBRATION_NEGATIVES,
                   rate_episodes: Optional[Iterable[Episode]] = None, workers: int = 1) -> SpaceReport:
    """Calibrate at alpha/2, build composites on the test sets, and account their space"""
    epsilon = alpha / 2.0
    tau = calibrate_threshold(model, store, calibration, epsilon, min_negatives)
    calibrated = CalibratedModel(model, store, tau, precision)
    reports = [total_space(build_composite(calibrated, episode.storage, epsilon), alpha)
               for episode in test_episodes]
    state_bits = float(np.mean([r.state_bits for r in reports]))
    backup_bits = float(np.mean([r.backup_bits for r in reports]))
    rates = measure_fpr_fnr(CompositeOracle(calibrated, epsilon), rate_episodes or test_episodes,
                            query_budget, workers)
    utilizations = [model.memory_utilization(store, episode.storage) for episode in test_episodes]
    n = int(round(np.mean([r.n for r in reports])))
    report = SpaceReport(
        n=n,
        target_alpha=alpha,
        precision=precision,
        state_bits=state_bits,
        backup_bits=backup_bits,
        total_bits=state_bits + backup_bits,
        n_fn=float(np.mean([r.n_fn for r in reports])),
        measured_fpr=rates.fpr,
        fpr_ci=rates.fpr_ci,
        measured_fnr=rates.fnr,
        model_fnr=float(np.mean([r.n_fn / max(r.n, 1) for r in reports])),
        memory_utilization=None if utilizations[0] is None else float(np.mean(utilizations)),
        classical=classical_rows(n, alpha),
    )
    logger.info(f"{model.kind}: total {report.total_bits:.0f} bits (state {state_bits:.0f}, "
                f"backup {backup_bits:.0f}) vs bloom {report.classical['bloom_bits']}")
    return report


@dataclass
class ParamCount:
    parameters: int
    precision: int
    serialized_bytes: int
    checkpoint_bytes: int
    break_even_instances: Optional[int] = None


def param_count(model: FamiliarityModel, store: ParamStore, precision: int = 32,
                saving_bits_per_instance: Optional[float] = None) -> ParamCount:
    """Trainable values, their size at the declared precision, and the amortisation point"""
    if precision not in PRECISIONS:
        raise ValueError(f"precision must be one of {PRECISIONS}, got {precision}")
    parameters = store.count(trainable_only=True)
    logger.debug(f"{model.kind}: {parameters} trainable values at {precision} bits")
    break_even = None
    if saving_bits_per_instance is not None and saving_bits_per_instance > 0:
        break_even = int(math.ceil(parameters * precision / saving_bits_per_instance))
    return ParamCount(parameters, precision, parameters * precision // 8, len(store.to_bytes()), break_even)
