"""
Common interface for one-shot familiarity models.

A model writes a storage set into some state with a single forward pass
and answers membership queries with a logit. The graph methods build on a
Tape so the trainer can differentiate through both the write and the
queries; the array methods are the inference path used by evaluation.
"""
import logging
from abc import ABC, abstractmethod
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from core.params import CheckpointError, ParamStore
from core.tensor import Tape, Tensor
from models.encoders import Encoder

logger = logging.getLogger(__name__)

PRECISIONS = (16, 32, 64)


def item_count(items) -> int:
    return items.shape[0] if isinstance(items, np.ndarray) else len(items)


class FamiliarityModel(ABC):
    """Base class for NBF, LSTM and MemNet familiarity models"""

    kind = 'model'

    def __init__(self, encoder: Encoder):
        self.encoder = encoder

    def init_params(self, rng: np.random.Generator) -> ParamStore:
        store = ParamStore()
        self.encoder.init_params(store, rng)
        self._init_params(store, rng)
        logger.debug(f"{self.kind}: initialised {store.count()} trainable values")
        return store

    @abstractmethod
    def _init_params(self, store: ParamStore, rng: np.random.Generator):
        ...

    def check_set_size(self, n: int):
        """Reject storage sets the model cannot be trained on"""

    @abstractmethod
    def write_graph(self, tape: Tape, store: ParamStore, items) -> Tuple[Tensor, Dict[str, Any]]:
        """Record the one-shot write of ``items``; returns (state tensor, aux)"""

    @abstractmethod
    def read_graph(self, tape: Tape, store: ParamStore, state: Tensor, queries) -> Tuple[Tensor, Dict[str, Any]]:
        """Record queries against a state; returns ((batch,) logits, aux)"""

    def episode_logits(self, tape: Tape, store: ParamStore, storage, queries) -> Tuple[Tensor, Dict[str, Any]]:
        state, write_aux = self.write_graph(tape, store, storage)
        logits, read_aux = self.read_graph(tape, store, state, queries)
        return logits, {'write': write_aux, 'read': read_aux, 'state': state}

    def write_state(self, store: ParamStore, items) -> np.ndarray:
        """Inference-time write: the state as an array"""
        state, _ = self.write_graph(Tape(), store, items)
        return state.value

    def query(self, store: ParamStore, state: np.ndarray, queries) -> np.ndarray:
        """Inference-time query: one logit per query item"""
        tape = Tape()
        logits, _ = self.read_graph(tape, store, tape.constant(state), queries)
        return logits.value

    def state_values(self, state: np.ndarray) -> int:
        """Number of real values the written state occupies"""
        return int(np.asarray(state).size)

    def state_bits(self, state: np.ndarray, precision: int = 32) -> int:
        if precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}, got {precision}")
        return self.state_values(state) * precision

    def after_step(self, store: ParamStore, auxes: List[Dict[str, Any]], training: bool = True) -> ParamStore:
        """Hook for non-gradient state updates after an optimiser step"""
        return store

    def validate_store(self, store: ParamStore):
        """Extra consistency checks on a loaded parameter store"""

    def load_params(self, path) -> ParamStore:
        """Load a checkpoint and check it matches this model's parameter layout"""
        template = self.init_params(np.random.default_rng(0))
        store = ParamStore.load(path, frozen=template.frozen)
        if set(store.names()) != set(template.names()):
            missing = sorted(set(template.names()) - set(store.names()))
            extra = sorted(set(store.names()) - set(template.names()))
            raise CheckpointError(f"checkpoint does not fit {self.kind}: missing {missing}, unexpected {extra}")
        for name in template:
            if store[name].shape != template[name].shape:
                raise CheckpointError(f"{name}: checkpoint shape {store[name].shape} != model shape {template[name].shape}")
        self.validate_store(store)
        return store

    def describe(self) -> Dict[str, Any]:
        return {'kind': self.kind, 'encoder': self.encoder.kind}

    def memory_utilization(self, store: ParamStore, items) -> Optional[float]:
        return None
