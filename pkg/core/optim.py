"""
Adam optimizer and global-norm gradient clipping
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from core.params import ParamStore

logger = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    """Raised when a gradient holds NaN or infinity; carries the offending names"""

    def __init__(self, names):
        self.names = sorted(names)
        super().__init__(f"non-finite gradients for: {', '.join(self.names)}")


@dataclass
class AdamState:
    """Per-parameter moments plus the step counter"""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_store(cls, store: ParamStore, learning_rate: float = 1e-3, beta1: float = 0.9,
                  beta2: float = 0.999, epsilon: float = 1e-8) -> 'AdamState':
        names = store.trainable_names()
        return cls(
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
            first_moment={name: np.zeros_like(store[name]) for name in names},
            second_moment={name: np.zeros_like(store[name]) for name in names},
        )


def check_finite(grads: Dict[str, np.ndarray]):
    bad = [name for name, grad in grads.items() if not np.all(np.isfinite(grad))]
    if bad:
        raise NonFiniteGradientError(bad)


def adam_step(store: ParamStore, grads: Dict[str, np.ndarray],
              state: AdamState) -> Tuple[ParamStore, AdamState]:
    """One bias-corrected Adam update; returns the new store and state"""
    check_finite(grads)
    for name, grad in grads.items():
        if name not in state.first_moment:
            raise KeyError(f"gradient for non-trainable or unknown parameter {name!r}")
        if grad.shape != store[name].shape:
            raise ValueError(f"{name}: gradient shape {grad.shape} != parameter shape {store[name].shape}")

    step = state.step + 1
    first, second, updates = {}, {}, {}
    correction1 = 1.0 - state.beta1 ** step
    correction2 = 1.0 - state.beta2 ** step
    for name, m in state.first_moment.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(m)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * state.second_moment[name] + (1.0 - state.beta2) * grad * grad
        first[name], second[name] = m, v
        update = state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        updates[name] = store[name] - update

    new_state = AdamState(
        learning_rate=state.learning_rate,
        beta1=state.beta1,
        beta2=state.beta2,
        epsilon=state.epsilon,
        step=step,
        first_moment=first,
        second_moment=second,
    )
    return store.replace(updates), new_state


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale all gradients together so their joint L2 norm is at most max_norm"""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    logger.debug(f"Clipping gradients: norm {norm:.4f} -> {max_norm}")
    return {name: g * scale for name, g in grads.items()}, norm
