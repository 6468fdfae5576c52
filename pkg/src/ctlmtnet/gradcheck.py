"""Central-difference gradient oracle, independent of the tape."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad

GRAD_FLOOR = 1e-6


def finite_diff_gradient(f: Callable[[Tensor], Tensor | float], x, h: float = 1e-5) -> np.ndarray:
    """``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every coordinate ``i`` of ``x``."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.empty_like(flat)

    def _value(arr):
        with no_grad():
            out = f(Tensor(arr))
        return float(out.data.reshape(())) if isinstance(out, Tensor) else float(out)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = _value(base)
        flat[i] = orig - h
        minus = _value(base)
        flat[i] = orig
        grad[i] = (plus - minus) / (2.0 * h)
    return grad.reshape(base.shape)


def gradient_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR):
    """Return (max relative error over large entries, max absolute error over small ones).

    Entries where both gradients are at most ``floor`` in magnitude are judged
    on absolute error; everything else on relative error.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    diff = np.abs(analytic - numeric)
    large = scale > floor
    rel = float((diff[large] / scale[large]).max()) if large.any() else 0.0
    absolute = float(diff[~large].max()) if (~large).any() else 0.0
    return rel, absolute


def check_gradient(analytic, numeric, rtol: float = 1e-5, atol: float = 1e-7, floor: float = GRAD_FLOOR) -> bool:
    rel, absolute = gradient_errors(analytic, numeric, floor)
    return rel < rtol and absolute < atol
