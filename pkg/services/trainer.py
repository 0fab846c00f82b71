"""
Meta-training loop: sample episodes, write the storage set, query, take
the mean binary cross-entropy and update the parameters with Adam.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from core.optim import AdamState, NonFiniteGradientError, adam_step, clip_by_global_norm
from core.params import ParamStore
from core.tensor import Tape, Tensor, backward, bce_loss
from models.base import FamiliarityModel
from services.evaluation import episode_scores, rates_at_fnr_budget
from tasks.sampling import Episode, TaskSpec, episode_rngs, sample_episode
from tasks.sources import DatasetSource
from utils.clock import Stopwatch
from utils.io import write_csv

logger = logging.getLogger(__name__)

LOG_COLUMNS = ('step', 'loss', 'eval_fnr', 'eval_fpr', 'wall_seconds')
LSTM_CLIP_NORM = 5.0
EVAL_STREAM = 0x5EED


class NonFiniteLossError(FloatingPointError):
    """Raised when an episode loss is NaN or infinite"""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss or gradient; carries the last good parameters"""

    def __init__(self, message: str, last_good: ParamStore, step: int):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_steps: int = 1000
    eval_period: int = 1000
    eval_episodes: int = 20
    fnr_budget: float = 0.01
    early_stop_fpr: Optional[float] = None
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_steps < 0 or self.eval_period < 1 or self.eval_episodes < 1:
            raise ValueError("train batch_size, eval_period and eval_episodes must be positive")
        if not 0.0 <= self.fnr_budget < 1.0:
            raise ValueError(f"fnr_budget must lie in [0, 1), got {self.fnr_budget}")


@dataclass
class TrainResult:
    store: ParamStore
    log: List[Dict[str, Any]] = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False


def episode_loss(model: FamiliarityModel, store: ParamStore, episode: Episode,
                 tape: Optional[Tape] = None) -> Tuple[Tensor, Tensor, Dict[str, Any]]:
    """(mean BCE loss, per-query logits, aux) for one episode"""
    tape = tape or Tape()
    logits, aux = model.episode_logits(tape, store, episode.storage, episode.queries)
    loss = bce_loss(logits, tape.constant(episode.labels))
    if not np.isfinite(loss.value):
        raise NonFiniteLossError(f"non-finite episode loss {float(loss.value)}")
    return loss, logits, aux


def episode_gradients(model: FamiliarityModel, store: ParamStore,
                      episode: Episode) -> Tuple[float, Dict[str, np.ndarray], Dict[str, Any]]:
    tape = Tape()
    loss, _, aux = episode_loss(model, store, episode, tape)
    return float(loss.value), backward(tape, loss).by_name(), aux


def average_gradients(per_episode: List[Dict[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    names = per_episode[0].keys()
    return {name: sum(grads[name] for grads in per_episode) / len(per_episode) for name in names}


class MetaTrainer:
    """Runs the episodic training loop for one model on one task"""

    def __init__(self, model: FamiliarityModel, train_source: DatasetSource, task: TaskSpec,
                 config: TrainConfig, seed: int = 0, eval_source: Optional[DatasetSource] = None,
                 workers: int = 1):
        self.model = model
        self.train_source = train_source
        self.eval_source = eval_source or train_source
        self.task = task
        self.config = config
        self.seed = seed
        self.workers = max(1, workers)
        model.check_set_size(task.n)
        self.clip_norm = config.clip_norm
        if self.clip_norm is None and model.kind == 'lstm':
            self.clip_norm = LSTM_CLIP_NORM
        self.eval_episodes = [
            sample_episode(rng, self.eval_source, task)
            for rng in episode_rngs([seed, EVAL_STREAM], config.eval_episodes)
        ]

    def batch(self, step: int) -> List[Episode]:
        return [sample_episode(rng, self.train_source, self.task)
                for rng in episode_rngs([self.seed, step], self.config.batch_size)]

    def _gradients(self, store: ParamStore, episodes: List[Episode], pool: Optional[ThreadPoolExecutor]):
        if pool is None:
            return [episode_gradients(self.model, store, episode) for episode in episodes]
        return list(pool.map(lambda episode: episode_gradients(self.model, store, episode), episodes))

    def evaluate(self, store: ParamStore) -> Tuple[float, float]:
        """(fnr, fpr) over the held-out episodes at the configured FNR budget"""
        positives, negatives = episode_scores(self.model, store, self.eval_episodes)
        _, fnr, fpr = rates_at_fnr_budget(positives, negatives, self.config.fnr_budget)
        return fnr, fpr

    def step(self, store: ParamStore, optimizer: AdamState, step: int,
             pool: Optional[ThreadPoolExecutor] = None) -> Tuple[ParamStore, AdamState, float]:
        episodes = self.batch(step)
        try:
            results = self._gradients(store, episodes, pool)
        except NonFiniteLossError as e:
            raise TrainingDivergedError(f"step {step}: {e}", store, step)
        loss = float(np.mean([result[0] for result in results]))
        grads = average_gradients([result[1] for result in results])
        if self.clip_norm is not None:
            grads, norm = clip_by_global_norm(grads, self.clip_norm)
            logger.debug(f"step {step}: gradient norm {norm:.4f}")
        try:
            new_store, optimizer = adam_step(store, grads, optimizer)
        except NonFiniteGradientError as e:
            raise TrainingDivergedError(f"step {step}: {e}", store, step)
        new_store = self.model.after_step(new_store, [result[2] for result in results], training=True)
        return new_store, optimizer, loss

    def train(self, store: Optional[ParamStore] = None, log_path: Optional[Path] = None) -> TrainResult:
        cfg = self.config
        if store is None:
            store = self.model.init_params(np.random.default_rng([self.seed, 0]))
        optimizer = AdamState.for_store(store, learning_rate=cfg.learning_rate)
        result = TrainResult(store)
        stopwatch = Stopwatch()
        period_losses: List[float] = []
        logger.info(f"Training {self.model.kind} for {cfg.max_steps} steps "
                    f"({cfg.batch_size} episodes/step, {self.workers} workers)")

        pool = ThreadPoolExecutor(max_workers=self.workers) if self.workers > 1 else None
        try:
            for step in range(1, cfg.max_steps + 1):
                store, optimizer, loss = self.step(store, optimizer, step, pool)
                period_losses.append(loss)
                result.store, result.steps = store, step
                if step % cfg.eval_period == 0 or step == cfg.max_steps:
                    fnr, fpr = self.evaluate(store)
                    row = {
                        'step': step,
                        'loss': float(np.mean(period_losses)),
                        'eval_fnr': fnr,
                        'eval_fpr': fpr,
                        'wall_seconds': round(stopwatch.seconds, 3),
                    }
                    result.log.append(row)
                    period_losses = []
                    logger.info(f"step {step}: loss {row['loss']:.5f} eval fnr {fnr:.4f} fpr {fpr:.4f}")
                    if cfg.early_stop_fpr is not None and fpr <= cfg.early_stop_fpr:
                        logger.info(f"Early stop at step {step}: eval fpr {fpr:.4f} <= {cfg.early_stop_fpr}")
                        result.stopped_early = True
                        break
        except TrainingDivergedError as e:
            logger.error(f"Training diverged: {e}")
            if log_path is not None:
                write_csv(log_path, LOG_COLUMNS, result.log)
            raise
        finally:
            if pool is not None:
                pool.shutdown()

        if log_path is not None:
            write_csv(log_path, LOG_COLUMNS, result.log)
        return result


def train(model: FamiliarityModel, train_source: DatasetSource, task: TaskSpec, config: TrainConfig,
          seed: int = 0, eval_source: Optional[DatasetSource] = None, workers: int = 1,
          log_path: Optional[Path] = None, store: Optional[ParamStore] = None) -> TrainResult:
    trainer = MetaTrainer(model, train_source, task, config, seed, eval_source, workers)
    return trainer.train(store, log_path)
