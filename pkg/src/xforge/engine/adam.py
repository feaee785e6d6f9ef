"""Adam parameter updates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def init(self, params: Sequence[Tensor]) -> AdamState:
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step = 0
        return self


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | Tensor], state: AdamState) -> Sequence[Tensor]:
    """Apply one bias-corrected Adam update in place and return ``params``."""
    if not state.m:
        state.init(params)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError(f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ValueError(f"adam_step: parameter {i} has shape {p.shape}, gradient {g.shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype)
    return params
