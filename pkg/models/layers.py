"""
Dense building blocks shared by the encoders, controller and output networks
"""
from typing import Optional

import numpy as np

from core.params import ParamStore
from core.tensor import Tape, Tensor, add, layer_norm, leaky_relu, matmul, reshape


def init_linear(store: ParamStore, name: str, fan_in: int, fan_out: int,
                rng: np.random.Generator, scale: Optional[float] = None):
    scale = np.sqrt(2.0 / (fan_in + fan_out)) if scale is None else scale
    store.add(f"{name}.w", rng.normal(0.0, scale, size=(fan_in, fan_out)))
    store.add(f"{name}.b", np.zeros(fan_out))


def linear(tape: Tape, store: ParamStore, name: str, x: Tensor) -> Tensor:
    return add(matmul(x, tape.param(store, f"{name}.w")), tape.param(store, f"{name}.b"))


def init_layer_norm(store: ParamStore, name: str, dim: int):
    store.add(f"{name}.gain", np.ones(dim))
    store.add(f"{name}.bias", np.zeros(dim))


def apply_layer_norm(tape: Tape, store: ParamStore, name: str, x: Tensor) -> Tensor:
    return layer_norm(x, tape.param(store, f"{name}.gain"), tape.param(store, f"{name}.bias"))


def init_mlp_head(store: ParamStore, name: str, in_dim: int, hidden: int, out_dim: int,
                  rng: np.random.Generator):
    """Single hidden layer followed by layer normalisation"""
    init_linear(store, f"{name}.hidden", in_dim, hidden, rng)
    init_layer_norm(store, f"{name}.norm", hidden)
    init_linear(store, f"{name}.out", hidden, out_dim, rng)


def mlp_head(tape: Tape, store: ParamStore, name: str, x: Tensor) -> Tensor:
    hidden = apply_layer_norm(tape, store, f"{name}.norm", linear(tape, store, f"{name}.hidden", x))
    return linear(tape, store, f"{name}.out", leaky_relu(hidden))


def init_residual_mlp(store: ParamStore, name: str, in_dim: int, hidden: int,
                      rng: np.random.Generator, depth: int = 3):
    init_linear(store, f"{name}.in", in_dim, hidden, rng)
    for layer in range(1, depth):
        init_linear(store, f"{name}.res{layer}", hidden, hidden, rng)
    init_linear(store, f"{name}.logit", hidden, 1, rng)


def residual_mlp(tape: Tape, store: ParamStore, name: str, x: Tensor, depth: int = 3) -> Tensor:
    """depth leaky-ReLU layers with residual connections, projected to one logit per row"""
    h = leaky_relu(linear(tape, store, f"{name}.in", x))
    for layer in range(1, depth):
        h = add(h, leaky_relu(linear(tape, store, f"{name}.res{layer}", h)))
    logits = linear(tape, store, f"{name}.logit", h)
    return reshape(logits, shape=(logits.shape[0],))


def init_mlp(store: ParamStore, name: str, sizes, rng: np.random.Generator):
    for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        init_linear(store, f"{name}.{layer}", fan_in, fan_out, rng)


def mlp(tape: Tape, store: ParamStore, name: str, x: Tensor, layers: int,
        final_activation: bool = True) -> Tensor:
    for layer in range(layers):
        x = linear(tape, store, f"{name}.{layer}", x)
        if final_activation or layer < layers - 1:
            x = leaky_relu(x)
    return x
