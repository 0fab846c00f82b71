"""
Standard LSTM cell built from tape primitives
"""
from typing import NamedTuple, Tuple

import numpy as np

from core.params import ParamStore
from core.tensor import (
    Tape, Tensor, ShapeError, add, concat, matmul, multiply, sigmoid, slice_axis, tanh
)


class LSTMWeights(NamedTuple):
    """Fused gate weights: columns ordered input, forget, candidate, output"""
    kernel: Tensor
    bias: Tensor

    @property
    def hidden(self) -> int:
        return self.kernel.shape[1] // 4

    @classmethod
    def from_store(cls, tape: Tape, store: ParamStore, prefix: str) -> 'LSTMWeights':
        return cls(tape.param(store, f"{prefix}.kernel"), tape.param(store, f"{prefix}.bias"))


def init_lstm(store: ParamStore, prefix: str, input_dim: int, hidden: int,
              rng: np.random.Generator, forget_bias: float = 1.0):
    scale = np.sqrt(1.0 / (input_dim + hidden))
    store.add(f"{prefix}.kernel", rng.normal(0.0, scale, size=(input_dim + hidden, 4 * hidden)))
    bias = np.zeros(4 * hidden)
    bias[hidden:2 * hidden] = forget_bias
    store.add(f"{prefix}.bias", bias)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, weights: LSTMWeights) -> Tuple[Tensor, Tensor]:
    """One step: returns (h', c')"""
    hidden = weights.hidden
    if h.shape[-1] != hidden or c.shape[-1] != hidden:
        raise ShapeError(f"lstm_cell: state shapes {h.shape}/{c.shape} do not match hidden size {hidden}")
    if x.shape[-1] + hidden != weights.kernel.shape[0]:
        raise ShapeError(f"lstm_cell: input {x.shape} does not match kernel {weights.kernel.shape}")
    gates = add(matmul(concat([x, h], axis=-1), weights.kernel), weights.bias)
    input_gate = sigmoid(slice_axis(gates, start=0, stop=hidden))
    forget_gate = sigmoid(slice_axis(gates, start=hidden, stop=2 * hidden))
    candidate = tanh(slice_axis(gates, start=2 * hidden, stop=3 * hidden))
    output_gate = sigmoid(slice_axis(gates, start=3 * hidden, stop=4 * hidden))
    c_next = add(multiply(forget_gate, c), multiply(input_gate, candidate))
    h_next = multiply(output_gate, tanh(c_next))
    return h_next, c_next
