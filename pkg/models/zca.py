"""
Moving ZCA sphering of raw query words.

First and second moments follow exponential moving averages with decay
gamma. Every ``period`` updates the ZCA matrix of the current covariance is
recomputed and blended into the projection with discount eta / period.
The projection is only ever updated in training mode.
"""
import logging
from dataclasses import dataclass, replace

import numpy as np

from core.params import ParamStore

logger = logging.getLogger(__name__)

ZCA_EPSILON = 1e-5
ZCA_FIELDS = ('mean', 'second_moment', 'projection', 'step')


class SpheringError(FloatingPointError):
    """Raised when the moment estimates become non-finite"""


def zca_matrix(mean: np.ndarray, second_moment: np.ndarray, epsilon: float = ZCA_EPSILON) -> np.ndarray:
    """W = U diag((s + eps)^-1/2) U^T for the covariance second_moment - mean mean^T"""
    covariance = second_moment - np.outer(mean, mean)
    covariance = 0.5 * (covariance + covariance.T)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    return (eigenvectors / np.sqrt(eigenvalues + epsilon)) @ eigenvectors.T


@dataclass(frozen=True)
class ZCAState:
    mean: np.ndarray
    second_moment: np.ndarray
    projection: np.ndarray
    gamma: float = 0.99
    eta: float = 0.99
    period: int = 100
    step: int = 0
    epsilon: float = ZCA_EPSILON

    @classmethod
    def identity(cls, dim: int, gamma: float = 0.99, eta: float = 0.99, period: int = 100) -> 'ZCAState':
        return cls(np.zeros(dim), np.eye(dim), np.eye(dim), gamma, eta, period)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def project(self, raw: np.ndarray) -> np.ndarray:
        return raw @ self.projection

    def register(self, store: ParamStore, prefix: str = 'zca'):
        store.add(f"{prefix}.mean", self.mean, trainable=False)
        store.add(f"{prefix}.second_moment", self.second_moment, trainable=False)
        store.add(f"{prefix}.projection", self.projection, trainable=False)
        store.add(f"{prefix}.step", np.array([float(self.step)]), trainable=False)

    def arrays(self, prefix: str = 'zca'):
        return {
            f"{prefix}.mean": self.mean,
            f"{prefix}.second_moment": self.second_moment,
            f"{prefix}.projection": self.projection,
            f"{prefix}.step": np.array([float(self.step)]),
        }

    @classmethod
    def from_store(cls, store: ParamStore, gamma: float, eta: float, period: int,
                   prefix: str = 'zca') -> 'ZCAState':
        return cls(
            mean=np.array(store[f"{prefix}.mean"]),
            second_moment=np.array(store[f"{prefix}.second_moment"]),
            projection=np.array(store[f"{prefix}.projection"]),
            gamma=gamma,
            eta=eta,
            period=period,
            step=int(store[f"{prefix}.step"][0]),
        )


def zca_update(state: ZCAState, batch: np.ndarray, training: bool = True) -> ZCAState:
    """Fold a batch of raw queries (rows) into the moving estimates"""
    if not training:
        return state
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[1] != state.dim:
        raise ValueError(f"zca_update: batch width {batch.shape[1]} != sphering dim {state.dim}")
    gamma = state.gamma
    mean = gamma * state.mean + (1.0 - gamma) * batch.mean(axis=0)
    second = gamma * state.second_moment + (1.0 - gamma) * (batch.T @ batch) / batch.shape[0]
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(second))):
        raise SpheringError("non-finite moment estimates in moving ZCA")

    step = state.step + 1
    projection = state.projection
    if step % state.period == 0:
        discount = state.eta / state.period
        projection = discount * projection + (1.0 - discount) * zca_matrix(mean, second, state.epsilon)
        logger.debug(f"ZCA projection refreshed at step {step}")
    return replace(state, mean=mean, second_moment=second, projection=projection, step=step)
