"""
Input encoders f_enc: dense vectors or strings to embeddings z
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Sequence

import mmh3
import numpy as np

from core.lstm import LSTMWeights, init_lstm, lstm_cell
from core.params import ParamStore
from core.tensor import Tape, Tensor, add, multiply
from models.layers import init_linear, init_mlp, linear, mlp

logger = logging.getLogger(__name__)

ENCODER_KINDS = ('mlp', 'trigram', 'char_lstm')
BYTE_VOCAB = 256


class Encoder(ABC):
    """Maps a batch of items to a (batch, output_dim) embedding"""

    kind = 'encoder'

    def __init__(self, output_dim: int, hidden: int, prefix: str = 'encoder'):
        self.output_dim = output_dim
        self.hidden = hidden
        self.prefix = prefix

    @abstractmethod
    def init_params(self, store: ParamStore, rng: np.random.Generator):
        ...

    @abstractmethod
    def encode(self, tape: Tape, store: ParamStore, items) -> Tensor:
        ...


class MLPEncoder(Encoder):
    """Two leaky-ReLU layers over dense vectors"""

    kind = 'mlp'

    def __init__(self, input_dim: int, output_dim: int, hidden: int = 128, prefix: str = 'encoder'):
        super().__init__(output_dim, hidden, prefix)
        self.input_dim = input_dim

    def init_params(self, store, rng):
        init_mlp(store, self.prefix, [self.input_dim, self.hidden, self.output_dim], rng)

    def encode(self, tape, store, items) -> Tensor:
        x = np.asarray(items, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"mlp encoder expects (batch, {self.input_dim}) vectors, got {x.shape}")
        return mlp(tape, store, self.prefix, tape.constant(x), layers=2)


def _as_bytes(item) -> bytes:
    return item if isinstance(item, bytes) else str(item).encode('utf-8')


def trigram_features(items: Sequence, buckets: int, seed: int = 0) -> np.ndarray:
    """Hashed bag of character trigrams (with boundary markers), L2-normalised per item"""
    features = np.zeros((len(items), buckets))
    for row, item in enumerate(items):
        padded = b'\x02' + _as_bytes(item) + b'\x03'
        for start in range(max(1, len(padded) - 2)):
            gram = padded[start:start + 3]
            features[row, mmh3.hash(gram, seed, signed=False) % buckets] += 1.0
        norm = np.linalg.norm(features[row])
        if norm > 0:
            features[row] /= norm
    return features


class TrigramEncoder(Encoder):
    """Hashed character trigrams followed by a two-layer MLP"""

    kind = 'trigram'

    def __init__(self, output_dim: int, hidden: int = 128, buckets: int = 512, prefix: str = 'encoder'):
        super().__init__(output_dim, hidden, prefix)
        self.buckets = buckets

    def init_params(self, store, rng):
        init_mlp(store, self.prefix, [self.buckets, self.hidden, self.output_dim], rng)

    def encode(self, tape, store, items) -> Tensor:
        features = trigram_features(items, self.buckets)
        return mlp(tape, store, self.prefix, tape.constant(features), layers=2)


class CharLSTMEncoder(Encoder):
    """Byte-level LSTM; the final hidden state is projected to the embedding"""

    kind = 'char_lstm'

    def __init__(self, output_dim: int, hidden: int = 128, embed_dim: int = 32, prefix: str = 'encoder'):
        super().__init__(output_dim, hidden, prefix)
        self.embed_dim = embed_dim

    def init_params(self, store, rng):
        store.add(f"{self.prefix}.embed", rng.normal(0.0, 0.1, size=(BYTE_VOCAB, self.embed_dim)))
        init_lstm(store, f"{self.prefix}.lstm", self.embed_dim, self.hidden, rng)
        init_linear(store, f"{self.prefix}.proj", self.hidden, self.output_dim, rng)

    def encode(self, tape, store, items) -> Tensor:
        encoded: List[bytes] = [_as_bytes(item) for item in items]
        batch = len(encoded)
        steps = max((len(b) for b in encoded), default=0)
        weights = LSTMWeights.from_store(tape, store, f"{self.prefix}.lstm")
        embed = tape.param(store, f"{self.prefix}.embed")
        h = tape.constant(np.zeros((batch, self.hidden)))
        c = tape.constant(np.zeros((batch, self.hidden)))
        for step in range(steps):
            one_hot = np.zeros((batch, BYTE_VOCAB))
            mask = np.zeros((batch, 1))
            for row, chars in enumerate(encoded):
                if step < len(chars):
                    one_hot[row, chars[step]] = 1.0
                    mask[row, 0] = 1.0
            x = tape.constant(one_hot) @ embed
            h_next, c_next = lstm_cell(x, h, c, weights)
            h = add(multiply(h_next, mask), multiply(h, 1.0 - mask))
            c = add(multiply(c_next, mask), multiply(c, 1.0 - mask))
        return linear(tape, store, f"{self.prefix}.proj", h)


@dataclass
class EncoderConfig:
    kind: str = 'mlp'
    output_dim: int = 32
    hidden: int = 128
    input_dim: int = 0
    trigram_buckets: int = 512

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}; expected one of {ENCODER_KINDS}")
        if self.output_dim < 1 or self.hidden < 1:
            raise ValueError("encoder output_dim and hidden must be positive")


def build_encoder(config: EncoderConfig, prefix: str = 'encoder') -> Encoder:
    if config.kind == 'mlp':
        if config.input_dim < 1:
            raise ValueError("mlp encoder needs the input vector dimension")
        return MLPEncoder(config.input_dim, config.output_dim, config.hidden, prefix)
    if config.kind == 'trigram':
        return TrigramEncoder(config.output_dim, config.hidden, config.trigram_buckets, prefix)
    return CharLSTMEncoder(config.output_dim, config.hidden, prefix=prefix)
