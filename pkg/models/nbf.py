"""
Neural Bloom Filter: controller, additive write and multiplicative read.

The controller maps an item x to an embedding z, a query word q and a write
word w. The address a = softmax(q A) (or its top-k renormalised variant)
selects memory slots. Writing adds the outer product a w^T to the slot
matrix M (m_slots x d_w), so the memory of a set is a plain sum and does not
depend on the order of the writes. Reading masks M row-wise by a, flattens
it, and feeds [r, w, z] to a residual output network producing one logit.
"""
import logging
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, NamedTuple

import numpy as np

from core.params import CheckpointError, ParamStore
from core.tensor import (
    ShapeError, Tape, Tensor, concat, flatten, matmul, multiply, outer_product,
    reshape, softmax, topk_softmax
)
from models.address import ADDRESS_MODES, AddressMatrix, matrix_from_seeds
from models.base import PRECISIONS, FamiliarityModel
from models.encoders import Encoder, EncoderConfig, build_encoder
from models.layers import init_mlp_head, init_residual_mlp, mlp_head, residual_mlp
from models.zca import ZCAState, zca_update

logger = logging.getLogger(__name__)

MEMORY_MAGIC = b'NBM1'
MEMORY_HEADER = struct.Struct('<4sIQQQ')
PRECISION_DTYPES = {16: '<f2', 32: '<f4', 64: '<f8'}


@dataclass
class NBFConfig:
    slots: int = 64
    word_size: int = 8
    query_dim: int = 32
    address_mode: str = 'trainable'
    k_addr: int = 0
    sphering: bool = False
    gamma: float = 0.99
    eta: float = 0.99
    period: int = 100
    hidden: int = 128
    output_depth: int = 3
    constant_write: bool = False
    linear_read: bool = False
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.slots < 1:
            raise ValueError(f"slots must be >= 1, got {self.slots}")
        if self.word_size < 1:
            raise ValueError(f"word_size must be >= 1, got {self.word_size}")
        if self.query_dim < 1:
            raise ValueError(f"query_dim must be >= 1, got {self.query_dim}")
        if not 0 <= self.k_addr <= self.slots:
            raise ValueError(f"k_addr must lie in [0, {self.slots}], got {self.k_addr}")
        if self.address_mode not in ADDRESS_MODES:
            raise ValueError(f"address_mode must be one of {ADDRESS_MODES}, got {self.address_mode!r}")
        if not (0.0 <= self.gamma < 1.0 and 0.0 <= self.eta <= 1.0):
            raise ValueError(f"sphering decays out of range: gamma={self.gamma}, eta={self.eta}")
        if self.period < 1:
            raise ValueError(f"period must be >= 1, got {self.period}")

    @property
    def sparse(self) -> bool:
        return self.k_addr > 0


class ControllerOutput(NamedTuple):
    z: Tensor
    raw_query: Tensor
    q: Tensor
    a: Tensor
    w: Tensor


@dataclass(frozen=True)
class MemoryState:
    """Slot matrix M and the number of items written into it"""
    matrix: np.ndarray
    writes: int = 0

    @classmethod
    def zeros(cls, slots: int, word_size: int) -> 'MemoryState':
        return cls(np.zeros((slots, word_size)), 0)

    @property
    def shape(self):
        return self.matrix.shape

    def add(self, addresses: np.ndarray, words: np.ndarray) -> 'MemoryState':
        addresses, words = np.atleast_2d(addresses), np.atleast_2d(words)
        if addresses.shape[1] != self.matrix.shape[0] or words.shape[1] != self.matrix.shape[1]:
            raise ShapeError(
                f"write of addresses {addresses.shape} / words {words.shape} into memory {self.matrix.shape}")
        return MemoryState(self.matrix + addresses.T @ words, self.writes + addresses.shape[0])

    def to_bytes(self, precision: int = 32) -> bytes:
        if precision not in PRECISION_DTYPES:
            raise ValueError(f"precision must be one of {PRECISIONS}, got {precision}")
        slots, word = self.matrix.shape
        header = MEMORY_HEADER.pack(MEMORY_MAGIC, precision, slots, word, self.writes)
        return header + self.matrix.astype(PRECISION_DTYPES[precision]).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> 'MemoryState':
        if len(data) < MEMORY_HEADER.size:
            raise CheckpointError(f"memory state truncated at offset {len(data)}")
        magic, precision, slots, word, writes = MEMORY_HEADER.unpack_from(data)
        if magic != MEMORY_MAGIC:
            raise CheckpointError(f"bad memory magic {magic!r}")
        if precision not in PRECISION_DTYPES:
            raise CheckpointError(f"unsupported memory precision {precision}")
        payload = data[MEMORY_HEADER.size:]
        expected = slots * word * precision // 8
        if len(payload) != expected:
            raise CheckpointError(
                f"memory payload is {len(payload)} bytes, expected {expected} at offset {MEMORY_HEADER.size}")
        matrix = np.frombuffer(payload, dtype=PRECISION_DTYPES[precision]).astype(np.float64)
        return cls(matrix.reshape(slots, word), writes)


def memory_utilization(addresses) -> float:
    """Fraction of slots whose accumulated address mass exceeds 1 / (10 m)"""
    addresses = np.asarray(addresses, dtype=np.float64)
    if addresses.size == 0:
        return 0.0
    addresses = np.atleast_2d(addresses)
    slots = addresses.shape[1]
    mass = addresses.sum(axis=0)
    return float(np.count_nonzero(mass > 1.0 / (10 * slots)) / slots)


class NeuralBloomFilter(FamiliarityModel):
    """Memory-augmented familiarity model with additive writes"""

    kind = 'nbf'

    def __init__(self, config: NBFConfig, encoder: Encoder = None):
        super().__init__(encoder or build_encoder(config.encoder))
        self.config = config

    @property
    def read_dim(self) -> int:
        cfg = self.config
        return cfg.word_size if cfg.linear_read else cfg.slots * cfg.word_size

    def _init_params(self, store: ParamStore, rng: np.random.Generator):
        cfg = self.config
        z_dim = self.encoder.output_dim
        init_mlp_head(store, 'query', z_dim, cfg.hidden, cfg.query_dim, rng)
        if not cfg.constant_write:
            init_mlp_head(store, 'write', z_dim, cfg.hidden, cfg.word_size, rng)
        AddressMatrix.build(cfg.address_mode, cfg.query_dim, cfg.slots, rng).register(store)
        if cfg.sphering:
            ZCAState.identity(cfg.query_dim, cfg.gamma, cfg.eta, cfg.period).register(store)
        init_residual_mlp(store, 'output', self.read_dim + cfg.word_size + z_dim,
                          cfg.hidden, rng, depth=cfg.output_depth)

    def validate_store(self, store: ParamStore):
        if self.config.address_mode == 'seeded':
            seeds = store['address.seeds'].astype(np.uint16)
            rebuilt = matrix_from_seeds(seeds, self.config.query_dim, self.config.slots)
            if not np.array_equal(rebuilt, store['address']):
                raise CheckpointError("seeded address matrix does not match its seeds")

    def zca_state(self, store: ParamStore) -> ZCAState:
        cfg = self.config
        return ZCAState.from_store(store, cfg.gamma, cfg.eta, cfg.period)

    def address(self, tape: Tape, store: ParamStore, q: Tensor) -> Tensor:
        A = tape.param(store, 'address')
        if q.shape[-1] != A.shape[0]:
            raise ShapeError(f"query word of width {q.shape[-1]} does not match address matrix {A.shape}")
        scores = matmul(q, A)
        if self.config.sparse:
            return topk_softmax(scores, k=self.config.k_addr)
        return softmax(scores)

    def controller(self, tape: Tape, store: ParamStore, items) -> ControllerOutput:
        cfg = self.config
        z = self.encoder.encode(tape, store, items)
        raw_query = mlp_head(tape, store, 'query', z)
        q = matmul(raw_query, tape.param(store, 'zca.projection')) if cfg.sphering else raw_query
        a = self.address(tape, store, q)
        if cfg.constant_write:
            w = tape.constant(np.ones((z.shape[0], cfg.word_size)))
        else:
            w = mlp_head(tape, store, 'write', z)
        return ControllerOutput(z, raw_query, q, a, w)

    def write_graph(self, tape, store, items):
        out = self.controller(tape, store, items)
        return outer_product(out.a, out.w), {'controller': out}

    def read_words(self, memory: Tensor, a: Tensor) -> Tensor:
        cfg = self.config
        if memory.shape != (cfg.slots, cfg.word_size):
            raise ShapeError(f"memory shape {memory.shape} does not match ({cfg.slots}, {cfg.word_size})")
        if cfg.linear_read:
            return matmul(a, memory)
        batch = a.shape[0]
        masked = multiply(reshape(a, shape=(batch, cfg.slots, 1)),
                          reshape(memory, shape=(1, cfg.slots, cfg.word_size)))
        return flatten(masked, batch_dims=1)

    def read_graph(self, tape, store, state, queries):
        out = self.controller(tape, store, queries)
        r = self.read_words(state, out.a)
        logits = residual_mlp(tape, store, 'output', concat([r, out.w, out.z]),
                              depth=self.config.output_depth)
        return logits, {'controller': out, 'read_words': r}

    def write(self, memory: MemoryState, items, store: ParamStore) -> MemoryState:
        """Add the items' outer products a w^T to a memory state"""
        if memory.shape != (self.config.slots, self.config.word_size):
            raise ShapeError(f"memory shape {memory.shape} does not match this model")
        out = self.controller(Tape(), store, items)
        return memory.add(out.a.value, out.w.value)

    def read(self, memory: MemoryState, queries, store: ParamStore) -> np.ndarray:
        return self.query(store, memory.matrix, queries)

    def write_state(self, store, items) -> np.ndarray:
        cfg = self.config
        return self.write(MemoryState.zeros(cfg.slots, cfg.word_size), items, store).matrix

    def after_step(self, store: ParamStore, auxes: List[Dict[str, Any]], training: bool = True) -> ParamStore:
        if not (self.config.sphering and training and auxes):
            return store
        raw = [aux[part]['controller'].raw_query.value for aux in auxes for part in ('write', 'read')]
        state = zca_update(self.zca_state(store), np.concatenate(raw, axis=0), training=training)
        return store.replace(state.arrays())

    def addresses(self, store: ParamStore, items) -> np.ndarray:
        return self.controller(Tape(), store, items).a.value

    def memory_utilization(self, store, items) -> float:
        return memory_utilization(self.addresses(store, items))

    def describe(self):
        cfg = self.config
        return {
            **super().describe(),
            'slots': cfg.slots,
            'word_size': cfg.word_size,
            'address_mode': cfg.address_mode,
            'k_addr': cfg.k_addr,
            'sphering': cfg.sphering,
        }
