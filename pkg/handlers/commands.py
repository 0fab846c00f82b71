"""
Command handlers: train, eval, sweep, bench, compare and gen-data
"""
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from config.schema import ConfigError, RunConfig, config_hash, to_dict
from core.params import CheckpointError
from filters.bloom import FilterFormatError
from models.factory import build_model
from services.curves import (
    EXTRAPOLATION_COLUMNS, SPACE_COLUMNS, CurveSettings, TrainedEntry, extrapolation_curve, space_curve
)
from services.evaluation import calibration_episodes, evaluate_space, param_count
from services.sweep import SWEEP_COLUMNS, sweep
from services.timing import TIMING_COLUMNS, filter_target, model_target, timing_bench
from services.trainer import LOG_COLUMNS, TrainingDivergedError, train
from tasks.sampling import episode_stream, sample_episodes
from tasks.sources import DatasetError, DatasetSource, load_source, split
from handlers.reports import RunManifest, TableResult, write_error, write_manifest, write_report

logger = logging.getLogger(__name__)

COMMANDS = ('train', 'eval', 'sweep', 'bench', 'compare', 'gen-data')
CHECKPOINT_NAME = 'checkpoint.nbf1'
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
# Episodes for calibration, test sets and rate measurement come from separate seed streams
CALIBRATION_STREAM, TEST_STREAM, RATE_STREAM = 11, 12, 13


class CommandHandlers:
    """Runs one CLI command against a validated configuration"""

    def __init__(self, config: RunConfig, out_dir: Path, workers: int = 1):
        self.config = config
        self.out_dir = Path(out_dir)
        self.workers = workers
        self._sources: Optional[Tuple[DatasetSource, DatasetSource]] = None
        self.artifacts: Dict[str, str] = {}

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.config.eval.checkpoint) if self.config.eval.checkpoint else self.out_dir / CHECKPOINT_NAME

    def sources(self) -> Tuple[DatasetSource, DatasetSource]:
        """(train, test); exponential tasks evaluate on the training items"""
        if self._sources is None:
            source = load_source(self.config.data)
            if self.config.task.kind == 'exponential' or self.config.data.test_fraction == 0.0:
                self._sources = (source, source)
            else:
                self._sources = split(source, self.config.data.test_fraction, self.config.data.seed)
        return self._sources

    def _build(self, kind: str):
        train_source, _ = self.sources()
        try:
            return build_model(kind, self.config, train_source)
        except ValueError as e:
            raise ConfigError(kind, str(e))

    def _load_model(self, path: Path, kind: Optional[str] = None):
        model = self._build(kind or self.config.model)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return model, model.load_params(path)

    def _evaluation_episodes(self, task=None):
        cfg = self.config
        _, test_source = self.sources()
        task = task or replace(cfg.task, n_min=0)
        calibration = calibration_episodes([cfg.seed, CALIBRATION_STREAM], test_source, task, cfg.eval.min_negatives)
        tests = sample_episodes([cfg.seed, TEST_STREAM], test_source, task, cfg.eval.test_episodes)
        rates = episode_stream([cfg.seed, RATE_STREAM], test_source, task)
        return calibration, tests, rates

    def _curve_settings(self) -> CurveSettings:
        cfg = self.config
        return CurveSettings(
            alpha=cfg.eval.alpha,
            precision=cfg.eval.precision,
            query_budget=cfg.eval.query_budget,
            min_negatives=cfg.eval.min_negatives,
            test_episodes=cfg.eval.test_episodes,
            seed=cfg.seed,
            workers=self.workers,
            measure_cuckoo=cfg.compare.measure_cuckoo,
        )

    def train(self) -> Dict[str, Any]:
        cfg = self.config
        train_source, test_source = self.sources()
        model = self._build(cfg.model)
        try:
            result = train(model, train_source, cfg.task, cfg.train, cfg.seed,
                           eval_source=test_source, workers=self.workers)
        except TrainingDivergedError as e:
            path = e.last_good.save(self.out_dir / f"last_good.{CHECKPOINT_NAME}")
            logger.error(f"Saved last good parameters from step {e.step} to {path}")
            raise
        self.artifacts[CHECKPOINT_NAME] = str(result.store.save(self.checkpoint_path))
        counts = param_count(model, result.store, cfg.eval.precision)
        return {
            'train_log.csv': TableResult(LOG_COLUMNS, result.log),
            'train_summary.json': {
                'model': model.describe(),
                'steps': result.steps,
                'stopped_early': result.stopped_early,
                'checkpoint': str(self.checkpoint_path),
                'parameters': asdict(counts),
                'final': result.log[-1] if result.log else None,
            },
        }

    def eval(self) -> Dict[str, Any]:
        cfg = self.config
        model, store = self._load_model(self.checkpoint_path)
        calibration, tests, rates = self._evaluation_episodes()
        report = evaluate_space(model, store, calibration, tests, cfg.eval.alpha, cfg.eval.precision,
                                cfg.eval.query_budget, cfg.eval.min_negatives,
                                rate_episodes=rates, workers=self.workers)
        saving = report.classical['bloom_bits'] - report.total_bits
        counts = param_count(model, store, cfg.eval.precision, saving_bits_per_instance=saving)
        return {
            'eval_report.json': {
                'task': asdict(cfg.task),
                'model': model.describe(),
                'config_hash': config_hash(cfg),
                'space': report.to_dict(),
                'rates': {'fpr': report.measured_fpr, 'fnr': report.measured_fnr,
                          'model_fnr': report.model_fnr},
                'cis': {'fpr': list(report.fpr_ci) if report.fpr_ci else None},
                'parameters': asdict(counts),
                'timing': None,
            },
        }

    def sweep(self) -> Dict[str, Any]:
        cfg = self.config
        train_source, test_source = self.sources()
        result = sweep(cfg.sweep, cfg, train_source, test_source, cfg.eval.alpha, self.workers)
        if result.best is None:
            raise RuntimeError("every sweep cell failed")
        return {
            'sweep_results.csv': TableResult(SWEEP_COLUMNS, result.rows),
            'best_config.json': {'config': to_dict(result.best), 'config_hash': config_hash(result.best),
                                 'result': result.best_row},
        }

    def bench(self) -> Dict[str, Any]:
        cfg = self.config
        train_source, _ = self.sources()
        stored = sample_episodes([cfg.seed, TEST_STREAM], train_source, replace(cfg.task, n_min=0), 1)[0].storage
        targets = [filter_target(kind, stored, cfg.eval.alpha, cfg.seed) for kind in cfg.bench.filters]
        for path in cfg.bench.checkpoints:
            model, store = self._load_model(Path(path))
            targets.append(model_target(f"{model.kind}:{Path(path).name}", model, store, stored))
        for kind in cfg.bench.baseline_models:
            model = self._build(kind)
            store = model.init_params(np.random.default_rng(cfg.seed))
            targets.append(model_target(f"{kind}:untrained", model, store, stored))
        rows = timing_bench(targets, train_source.items, cfg.bench.batch_sizes, cfg.bench.repeats,
                            cfg.bench.warmup, self.workers, cfg.seed)
        return {'timing.csv': TableResult(TIMING_COLUMNS, rows)}

    def compare(self) -> Dict[str, Any]:
        cfg = self.config
        train_source, test_source = self.sources()
        entries: List[TrainedEntry] = []
        for path in cfg.compare.checkpoints:
            model, store = self._load_model(Path(path))
            entries.append(TrainedEntry(f"{model.kind}:{Path(path).name}", model, store))
        settings = self._curve_settings()
        results = {'space_curve.csv': TableResult(
            SPACE_COLUMNS, space_curve(entries, test_source, cfg.task, cfg.compare.sizes, settings))}
        if cfg.compare.extrapolate_sizes and entries:
            rows = extrapolation_curve(entries[0], test_source, cfg.task, cfg.compare.n_train,
                                       cfg.compare.extrapolate_sizes, settings)
            results['extrapolation.csv'] = TableResult(EXTRAPOLATION_COLUMNS, rows)
        return results

    def gen_data(self) -> Dict[str, Any]:
        cfg = self.config
        source = load_source(cfg.data)
        manifest = {'source': source.manifest(), 'spec': asdict(cfg.data)}
        if cfg.data.test_fraction > 0.0:
            train_source, test_source = split(source, cfg.data.test_fraction, cfg.data.seed)
            manifest['splits'] = {'train': train_source.manifest(), 'test': test_source.manifest()}
        return {'dataset_manifest.json': manifest}

    def handler(self, command: str) -> Callable[[], Dict[str, Any]]:
        if command not in COMMANDS:
            raise ConfigError('command', f"unknown command {command!r}; expected one of {COMMANDS}")
        return getattr(self, command.replace('-', '_'))


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, (DatasetError, FileNotFoundError, CheckpointError, FilterFormatError)):
        return EXIT_DATA
    return EXIT_RUNTIME


def report_failure(out_dir: Path, error: BaseException) -> int:
    code = exit_code_for(error)
    payload = write_error(out_dir, error, code)
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def run_command(command: str, config: RunConfig, out_dir: Path, workers: int = 1) -> int:
    """Run one command; returns the process exit code"""
    out_dir = Path(out_dir)
    logger.info(f"Running {command} (seed {config.seed}, config {config_hash(config)[:12]}) into {out_dir}")
    try:
        handlers = CommandHandlers(config, out_dir, workers)
        run = handlers.handler(command)
        manifest = RunManifest.for_run(command, config)
        write_manifest(manifest, out_dir)
        results = run()
        manifest.artifacts.update(handlers.artifacts)
        write_report(results, out_dir, manifest)
        logger.info(f"{command} finished")
        return EXIT_OK
    except Exception as e:
        logger.error(f"{command} failed: {e}")
        return report_failure(out_dir, e)
