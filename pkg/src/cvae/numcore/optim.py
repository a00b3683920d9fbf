"""Bias-corrected ADAM."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


class OptimizerError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> AdamState:
    """Update ``params`` in place and advance ``state`` by one step."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise OptimizerError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    step_size = state.lr / (1.0 - b1 ** t)
    inv_bc2 = 1.0 / (1.0 - b2 ** t)
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name].data -= step_size * m / (np.sqrt(v * inv_bc2) + state.eps)
    return state
