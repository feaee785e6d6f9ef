"""Parameter containers shared by the classifier and the explanation optimizer."""

from __future__ import annotations

import numpy as np

from .engine import Tensor
from .engine import functional as F


class Module:
    """Holds named parameter tensors; subclasses implement ``forward``."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value.astype(np.float32))
        self._params[name] = t
        return t

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in self._params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"parameter {k}: expected shape {t.shape}, got {state[k].shape}")
            t.data[...] = state[k]

    def parameter_count(self) -> int:
        return sum(t.size for t in self._params.values())

    def __call__(self, x: Tensor, *args, **kwargs) -> Tensor:
        return self.forward(x, *args, **kwargs)

    def forward(self, x: Tensor, *args, **kwargs):
        raise NotImplementedError


def he_conv(rng: np.random.Generator, cout: int, cin: int, k: int, nd: int = 2) -> np.ndarray:
    fan_in = cin * k**nd
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin) + (k,) * nd)


def he_dense(rng: np.random.Generator, fin: int, fout: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fin), size=(fin, fout))


class Conv(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 3, prefix: str = "conv", gain: float = 1.0):
        super().__init__()
        self.w = self.param(f"{prefix}.w", gain * he_conv(rng, cout, cin, k))
        self.b = self.param(f"{prefix}.b", np.zeros(cout))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.w, self.b)


def collect(*modules: Module) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for m in modules:
        out.update(m.parameters())
    return out
