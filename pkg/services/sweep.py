"""
Hyper-parameter sweep: train every grid cell and keep the one whose
composite consumes the least total space at the target false-positive rate.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

from config.schema import RunConfig, SweepGrid
from models.factory import build_model
from services.evaluation import CalibrationError, calibration_episodes, evaluate_space, param_count
from services.trainer import TrainingDivergedError, train
from tasks.sampling import sample_episodes
from tasks.sources import DatasetSource
from utils.io import write_csv

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ('cell', 'model', 'slots', 'word_size', 'hidden', 'eta', 'learning_rate',
                 'state_bits', 'backup_bits', 'total_bits', 'fpr', 'parameters', 'error')


@dataclass
class SweepResult:
    best: Optional[RunConfig]
    best_row: Optional[Dict]
    rows: List[Dict] = field(default_factory=list)


def grid_cells(grid: SweepGrid, config: RunConfig) -> List[RunConfig]:
    """One RunConfig per combination of the axes relevant to the model kind"""
    cells = []
    if config.model == 'nbf':
        etas = grid.sphering_decays if config.nbf.sphering else [config.nbf.eta]
        for slots, word, eta, lr in itertools.product(grid.slots, grid.word_sizes, etas, grid.learning_rates):
            k_addr = min(config.nbf.k_addr, slots)
            nbf = replace(config.nbf, slots=slots, word_size=word, eta=eta, k_addr=k_addr)
            cells.append(replace(config, nbf=nbf, train=replace(config.train, learning_rate=lr)))
    elif config.model == 'lstm':
        for hidden, lr in itertools.product(grid.hidden_sizes, grid.learning_rates):
            cells.append(replace(config, lstm=replace(config.lstm, hidden=hidden),
                                 train=replace(config.train, learning_rate=lr)))
    else:
        for word, lr in itertools.product(grid.word_sizes, grid.learning_rates):
            cells.append(replace(config, memnet=replace(config.memnet, word_size=word),
                                 train=replace(config.train, learning_rate=lr)))
    return cells


def _describe(index: int, cell: RunConfig) -> Dict:
    row = {'cell': index, 'model': cell.model, 'learning_rate': cell.train.learning_rate}
    if cell.model == 'nbf':
        row.update(slots=cell.nbf.slots, word_size=cell.nbf.word_size, eta=cell.nbf.eta)
    elif cell.model == 'lstm':
        row.update(hidden=cell.lstm.hidden)
    else:
        row.update(word_size=cell.memnet.word_size)
    return row


def sweep(grid: SweepGrid, config: RunConfig, train_source: DatasetSource, test_source: DatasetSource,
          target_fpr: Optional[float] = None, workers: int = 1, path: Optional[Path] = None) -> SweepResult:
    """Least total space wins; ties go to the cell with fewer parameters"""
    alpha = target_fpr if target_fpr is not None else config.eval.alpha
    cells = grid_cells(grid, config)
    logger.info(f"Sweeping {len(cells)} {config.model} cells at alpha={alpha}")
    task = replace(config.task, n_min=0)
    calibration = calibration_episodes([config.seed, 1], test_source, task, config.eval.min_negatives)
    tests = sample_episodes([config.seed, 2], test_source, task, config.eval.test_episodes)

    rows, best_key, best_index = [], None, None
    for index, cell in enumerate(cells):
        row = _describe(index, cell)
        try:
            model = build_model(cell.model, cell, train_source)
            result = train(model, train_source, cell.task, cell.train, cell.seed,
                           eval_source=test_source, workers=workers)
            report = evaluate_space(model, result.store, calibration, tests, alpha, cell.eval.precision,
                                    cell.eval.query_budget, cell.eval.min_negatives, workers=workers)
            params = param_count(model, result.store, cell.eval.precision).parameters
            row.update(state_bits=report.state_bits, backup_bits=report.backup_bits,
                       total_bits=report.total_bits, fpr=report.measured_fpr, parameters=params)
            key = (report.total_bits, params)
            if best_key is None or key < best_key:
                best_key, best_index = key, index
        except (TrainingDivergedError, CalibrationError) as e:
            logger.error(f"Sweep cell {index} failed: {e}")
            row.update(total_bits=math.inf, error=str(e))
        rows.append(row)
        logger.info(f"Sweep cell {index + 1}/{len(cells)}: total bits {row['total_bits']}")

    if path is not None:
        write_csv(path, SWEEP_COLUMNS, rows)
    if best_index is None:
        logger.error("Every sweep cell failed")
        return SweepResult(None, None, rows)
    return SweepResult(cells[best_index], rows[best_index], rows)
