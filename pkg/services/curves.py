"""
Space-versus-set-size comparisons and extrapolation curves
"""
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from core.params import ParamStore
from filters.sizing import analytical_fpr, bloom_size_for, cuckoo_bits
from models.base import FamiliarityModel
from services.evaluation import (
    DEFAULT_QUERY_BUDGET, MIN_CALIBRATION_NEGATIVES, FilterOracle, calibration_episodes,
    evaluate_space, measure_fpr_fnr
)
from tasks.sampling import TaskSpec, episode_stream, sample_episodes
from tasks.sources import DatasetSource
from utils.io import write_csv

logger = logging.getLogger(__name__)

SPACE_COLUMNS = ('model', 'n', 'state_bits', 'backup_bits', 'total_bits', 'fpr', 'fnr')
EXTRAPOLATION_COLUMNS = ('model', 'n', 'state_bits', 'backup_bits', 'total_bits',
                         'fpr', 'model_fnr', 'composite_fnr')
CALIBRATION_STREAM = 1
TEST_STREAM = 2
RATE_STREAM = 3


@dataclass
class TrainedEntry:
    """A trained model ready for evaluation under a display name"""
    name: str
    model: FamiliarityModel
    store: ParamStore


@dataclass
class CurveSettings:
    alpha: float = 0.01
    precision: int = 32
    query_budget: int = DEFAULT_QUERY_BUDGET
    min_negatives: int = MIN_CALIBRATION_NEGATIVES
    test_episodes: int = 20
    seed: int = 0
    workers: int = 1
    measure_cuckoo: bool = True


def classical_curve_rows(source: DatasetSource, task: TaskSpec, sizes: Sequence[int],
                         settings: CurveSettings) -> List[Dict]:
    """Bloom rows use the analytical FPR; cuckoo rows are measured"""
    rows = []
    for n in sizes:
        m, k = bloom_size_for(n, settings.alpha)
        rows.append({'model': 'bloom', 'n': n, 'state_bits': m, 'backup_bits': 0, 'total_bits': m,
                     'fpr': analytical_fpr(m, n, k), 'fnr': 0.0})
        cuckoo_fpr = None
        if settings.measure_cuckoo:
            sized = replace(task, n=n, n_min=0)
            rates = measure_fpr_fnr(FilterOracle('cuckoo', settings.alpha, settings.seed),
                                    episode_stream([settings.seed, RATE_STREAM, n], source, sized),
                                    settings.query_budget)
            cuckoo_fpr = rates.fpr
        bits = cuckoo_bits(n, settings.alpha)
        rows.append({'model': 'cuckoo', 'n': n, 'state_bits': bits, 'backup_bits': 0, 'total_bits': bits,
                     'fpr': cuckoo_fpr, 'fnr': 0.0})
    return rows


def neural_report(entry: TrainedEntry, source: DatasetSource, task: TaskSpec, n: int,
                  settings: CurveSettings, calibration_source: Optional[DatasetSource] = None):
    sized = replace(task, n=n, n_min=0)
    calibration = calibration_episodes([settings.seed, CALIBRATION_STREAM, n], calibration_source or source,
                                       sized, settings.min_negatives)
    tests = sample_episodes([settings.seed, TEST_STREAM, n], source, sized, settings.test_episodes)
    return evaluate_space(
        entry.model, entry.store, calibration, tests, settings.alpha, settings.precision,
        settings.query_budget, settings.min_negatives,
        rate_episodes=episode_stream([settings.seed, RATE_STREAM, n], source, sized),
        workers=settings.workers,
    )


def space_curve(entries: Sequence[TrainedEntry], source: DatasetSource, task: TaskSpec,
                sizes: Sequence[int], settings: CurveSettings, path: Optional[Path] = None,
                calibration_source: Optional[DatasetSource] = None) -> List[Dict]:
    """Total space against set size for each model, plus classical rows"""
    rows = classical_curve_rows(source, task, sizes, settings)
    for entry in entries:
        for n in sizes:
            report = neural_report(entry, source, task, n, settings, calibration_source)
            rows.append({
                'model': entry.name,
                'n': n,
                'state_bits': report.state_bits,
                'backup_bits': report.backup_bits,
                'total_bits': report.total_bits,
                'fpr': report.measured_fpr,
                'fnr': report.model_fnr,
            })
            logger.info(f"{entry.name} n={n}: total {report.total_bits:.0f} bits")
    if path is not None:
        write_csv(path, SPACE_COLUMNS, rows)
    return rows


def extrapolation_curve(entry: TrainedEntry, source: DatasetSource, task: TaskSpec, n_train: int,
                        sizes: Sequence[int], settings: CurveSettings, path: Optional[Path] = None,
                        calibration_source: Optional[DatasetSource] = None) -> List[Dict]:
    """Error rates and space of a model evaluated past its training set size"""
    if not sizes or max(sizes) <= n_train:
        raise ValueError(f"extrapolation sizes {list(sizes)} must extend past the training size {n_train}")
    rows = []
    for n in sizes:
        report = neural_report(entry, source, task, n, settings, calibration_source)
        rows.append({
            'model': entry.name,
            'n': n,
            'state_bits': report.state_bits,
            'backup_bits': report.backup_bits,
            'total_bits': report.total_bits,
            'fpr': report.measured_fpr,
            'model_fnr': report.model_fnr,
            'composite_fnr': report.measured_fnr,
        })
        logger.info(f"{entry.name} extrapolated to n={n} (trained at {n_train}): "
                    f"model fnr {report.model_fnr:.4f}")
    if path is not None:
        write_csv(path, EXTRAPOLATION_COLUMNS, rows)
    return rows
