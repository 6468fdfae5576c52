"""Adam with bias correction over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    lr_scale: Mapping[str, float] | None = None,
) -> AdamState:
    """Apply one Adam update to every parameter named in ``grads``.

    Parameters absent from ``grads`` are left untouched (frozen groups).
    ``params`` are updated by rebinding ``.data``; ``state`` is updated in place
    and returned.  ``lr_scale`` multiplies the step size of named parameters.
    """
    beta1, beta2 = betas
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        step = lr if lr_scale is None else lr * lr_scale.get(name, 1.0)
        p.data = p.data - step * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state
