"""AdamW with decoupled weight decay, operating on named parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError


@dataclass
class AdamWState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise DataError("learning rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise DataError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise DataError("eps must be positive")
        if self.weight_decay < 0:
            raise DataError("weight_decay must be non-negative")


def adamw_init(params: dict[str, np.ndarray], lr: float, **kwargs) -> AdamWState:
    state = AdamWState(lr=lr, **kwargs)
    state.m = {k: np.zeros_like(v) for k, v in params.items()}
    state.v = {k: np.zeros_like(v) for k, v in params.items()}
    return state


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One update, in place.  Weight decay is decoupled from the moments:

        p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)

    so decay shrinks parameters even when all gradients are zero.
    """
    if set(grads) != set(params):
        raise DataError("gradient keys do not match parameter keys")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p
        p -= state.lr * update
    return params, state
