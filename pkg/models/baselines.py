"""
One-shot memory baselines: an LSTM that compresses the storage set into its
final state, and a slot memory network that keeps one row per stored item.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from core.lstm import LSTMWeights, init_lstm, lstm_cell
from core.params import ParamStore
from core.tensor import (
    Tape, Tensor, add, concat, l2_normalize, matmul, multiply, reduce_max, reshape, slice_axis, transpose
)
from models.base import FamiliarityModel, item_count
from models.encoders import Encoder, EncoderConfig, build_encoder
from models.layers import init_linear, init_mlp, linear, mlp

logger = logging.getLogger(__name__)

DEFAULT_MAX_UNROLL = 1000


class UnrollLimitError(ValueError):
    """Raised when a storage set is longer than the allowed BPTT unroll"""


class EmptyMemoryError(ValueError):
    """Raised when querying a memory that holds no items"""


@dataclass
class LSTMConfig:
    hidden: int = 32
    query_hidden: int = 128
    max_unroll: int = DEFAULT_MAX_UNROLL
    allow_long_unroll: bool = False
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.hidden < 1 or self.query_hidden < 1 or self.max_unroll < 1:
            raise ValueError("lstm hidden, query_hidden and max_unroll must be positive")


@dataclass
class MemNetConfig:
    word_size: int = 2
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.word_size < 1:
            raise ValueError(f"memnet word_size must be >= 1, got {self.word_size}")


class LstmFamiliarityModel(FamiliarityModel):
    """Unrolls an LSTM over the encoded storage set; state is [h, c]"""

    kind = 'lstm'

    def __init__(self, config: LSTMConfig, encoder: Encoder = None):
        super().__init__(encoder or build_encoder(config.encoder))
        self.config = config

    def _init_params(self, store, rng):
        cfg = self.config
        z_dim = self.encoder.output_dim
        init_lstm(store, 'lstm', z_dim, cfg.hidden, rng)
        init_mlp(store, 'lstm_query', [2 * cfg.hidden + z_dim, cfg.query_hidden, 1], rng)

    def check_set_size(self, n: int):
        cfg = self.config
        if n > cfg.max_unroll and not cfg.allow_long_unroll:
            raise UnrollLimitError(
                f"set size {n} exceeds the BPTT unroll limit {cfg.max_unroll}; "
                f"set lstm.allow_long_unroll to train anyway")

    def write_graph(self, tape, store, items):
        if item_count(items) == 0:
            raise ValueError("lstm write needs a nonempty sequence")
        hidden = self.config.hidden
        z = self.encoder.encode(tape, store, items)
        weights = LSTMWeights.from_store(tape, store, 'lstm')
        h = tape.constant(np.zeros((1, hidden)))
        c = tape.constant(np.zeros((1, hidden)))
        for step in range(z.shape[0]):
            x = slice_axis(z, start=step, stop=step + 1, axis=0)
            h, c = lstm_cell(x, h, c, weights)
        return concat([h, c], axis=-1), {}

    def read_graph(self, tape, store, state, queries):
        z = self.encoder.encode(tape, store, queries)
        tiled = multiply(tape.constant(np.ones((z.shape[0], 1))), state)
        logits = mlp(tape, store, 'lstm_query', concat([tiled, z]), layers=2, final_activation=False)
        return reshape(logits, shape=(z.shape[0],)), {}

    def describe(self):
        return {**super().describe(), 'hidden': self.config.hidden}


def cosine_max_similarity(memory: Tensor, queries: Tensor) -> Tensor:
    """max over memory rows of cos(query, row), one value per query"""
    if memory.shape[0] == 0:
        raise EmptyMemoryError("memory network holds no items")
    similarity = matmul(l2_normalize(queries), transpose(l2_normalize(memory)))
    return reduce_max(similarity, axis=-1)


class MemNetFamiliarityModel(FamiliarityModel):
    """One embedded row per stored item; logit = alpha * max cosine + beta"""

    kind = 'memnet'

    def __init__(self, config: MemNetConfig, encoder: Encoder = None):
        super().__init__(encoder or build_encoder(config.encoder))
        self.config = config

    def _init_params(self, store, rng):
        init_linear(store, 'memnet.embed', self.encoder.output_dim, self.config.word_size, rng)
        store.add('memnet.alpha', np.array([5.0]))
        store.add('memnet.beta', np.array([-2.5]))

    def embed(self, tape: Tape, store: ParamStore, items) -> Tensor:
        return linear(tape, store, 'memnet.embed', self.encoder.encode(tape, store, items))

    def write_graph(self, tape, store, items):
        return self.embed(tape, store, items), {}

    def read_graph(self, tape, store, state, queries):
        similarity = cosine_max_similarity(state, self.embed(tape, store, queries))
        logits = add(multiply(similarity, tape.param(store, 'memnet.alpha')), tape.param(store, 'memnet.beta'))
        return logits, {'similarity': similarity}

    def write_state(self, store, items) -> np.ndarray:
        if item_count(items) == 0:
            return np.zeros((0, self.config.word_size))
        return super().write_state(store, items)

    def describe(self):
        return {**super().describe(), 'word_size': self.config.word_size}
