from __future__ import annotations

import numpy as np
import pytest

from xforge.classifier import ClassifierConfig, build_classifier
from xforge.engine import Tensor
from xforge.engine import functional as F
from xforge.nn import Module


class LinearModel(Module):
    """f(x) = W^T vec(x) + b; every attribution has a closed form."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray | None = None):
        super().__init__()
        self.input_shape = weights.shape[:-1]
        self.w = self.param("w", weights.reshape(-1, weights.shape[-1]))
        self.b = self.param("b", np.zeros(weights.shape[-1]) if bias is None else bias)

    def coef(self, cls: int) -> np.ndarray:
        return self.w.data[:, cls].reshape(self.input_shape).astype(np.float64)

    def forward(self, x: Tensor, activations=None) -> Tensor:
        return F.dense(x.reshape(x.shape[0], -1), self.w, self.b)


class ConstantModel(Module):
    def forward(self, x: Tensor, activations=None) -> Tensor:
        return F.dense(x.reshape(x.shape[0], -1), Tensor(np.zeros((int(np.prod(x.shape[1:])), 2))))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def linear_model(rng):
    return LinearModel(rng.normal(size=(2, 8, 8, 3)))


@pytest.fixture
def small_net():
    """Randomly initialized relu residual net on 2x8x8 inputs."""
    return build_classifier(ClassifierConfig(input_shape=(2, 8, 8), blocks=2, width=4, num_classes=3), seed=3)


@pytest.fixture
def small_input(rng):
    return rng.uniform(0, 1, size=(2, 8, 8))
