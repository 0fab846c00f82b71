"""
Central finite-difference checks for analytic gradients
"""
import logging
from typing import Callable, Dict, Iterable, Optional

import numpy as np

from core.params import ParamStore
from core.tensor import GradientError, Tape, Tensor, backward

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-6
DEFAULT_TOL = 1e-5


def _relative_error(analytic: np.ndarray, numeric: np.ndarray, tol: float) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + tol)))


def _scalar(value: np.ndarray) -> float:
    result = float(np.asarray(value).reshape(-1)[0])
    if not np.isfinite(result):
        raise GradientError("function evaluated to a non-finite value")
    return result


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = DEFAULT_STEP,
                      tol: float = DEFAULT_TOL) -> float:
    """Max over coordinates of |analytic - central difference| / (|central difference| + tol).

    ``f`` receives a leaf Tensor and must return a scalar Tensor on the same tape.
    """
    x = np.asarray(x, dtype=np.float64)
    tape = Tape()
    leaf = tape.leaf(x)
    out = f(leaf)
    _scalar(out.value)
    analytic = backward(tape, out)[leaf]

    def evaluate(point: np.ndarray) -> float:
        scratch = Tape()
        return _scalar(f(scratch.leaf(point)).value)

    numeric = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[index] += eps
        minus[index] -= eps
        numeric[index] = (evaluate(plus) - evaluate(minus)) / (2.0 * eps)
    return _relative_error(analytic, numeric, tol)


def param_gradient_errors(loss_fn: Callable[[Tape, ParamStore], Tensor], store: ParamStore,
                          names: Optional[Iterable[str]] = None, eps: float = DEFAULT_STEP,
                          tol: float = DEFAULT_TOL, max_coords: Optional[int] = None,
                          seed: int = 0) -> Dict[str, float]:
    """Finite-difference errors per parameter for a loss built from a ParamStore.

    With ``max_coords`` set, only that many randomly chosen coordinates of each
    parameter are perturbed.
    """
    tape = Tape()
    loss = loss_fn(tape, store)
    grads = backward(tape, loss).by_name()
    rng = np.random.default_rng(seed)
    names = list(names) if names is not None else store.trainable_names()

    def evaluate(trial_store: ParamStore) -> float:
        return _scalar(loss_fn(Tape(), trial_store).value)

    errors = {}
    for name in names:
        base = np.array(store[name])
        analytic = grads.get(name, np.zeros_like(base))
        coords = list(np.ndindex(base.shape))
        if max_coords is not None and len(coords) > max_coords:
            picks = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(picks)]
        a_vals, n_vals = [], []
        for index in coords:
            plus, minus = base.copy(), base.copy()
            plus[index] += eps
            minus[index] -= eps
            numeric = (evaluate(store.replace({name: plus})) - evaluate(store.replace({name: minus}))) / (2.0 * eps)
            a_vals.append(analytic[index])
            n_vals.append(numeric)
        errors[name] = _relative_error(np.array(a_vals), np.array(n_vals), tol)
        logger.debug(f"gradient check {name}: {errors[name]:.2e}")
    return errors
