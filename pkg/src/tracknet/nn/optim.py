"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              lr_mult: dict[str, float] | None = None) -> tuple[dict[str, np.ndarray], AdamState]:
    """One update; ``params`` arrays are modified in place and returned.

    Moments are kept in float64 so the trajectory does not depend on the
    dtype of the parameters.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for k, g in grads.items():
        if k not in params or params[k].shape != np.shape(g):
            raise ValueError(f"gradient {k} has shape {np.shape(g)}, parameter has "
                             f"{params[k].shape if k in params else 'none'}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step_lr = lr * (lr_mult.get(k, 1.0) if lr_mult else 1.0)
        update = step_lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p = params[k]
        p -= update.astype(p.dtype)
    return params, state
