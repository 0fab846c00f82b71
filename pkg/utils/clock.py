"""
Wall-clock helpers for training logs and benchmarks
"""
import time
from statistics import median
from typing import Callable, List


class Stopwatch:
    """Elapsed seconds since construction (or the last reset)"""

    def __init__(self):
        self._start = time.perf_counter()

    def reset(self):
        self._start = time.perf_counter()

    @property
    def seconds(self) -> float:
        return time.perf_counter() - self._start


def time_call(fn: Callable[[], object], repeats: int = 5, warmup: int = 1) -> List[float]:
    """Seconds per call for ``repeats`` runs after ``warmup`` discarded runs"""
    for _ in range(warmup):
        fn()
    timings = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        timings.append(time.perf_counter() - start)
    return timings


def median_seconds(fn: Callable[[], object], repeats: int = 5, warmup: int = 1) -> float:
    return median(time_call(fn, repeats=repeats, warmup=warmup))
