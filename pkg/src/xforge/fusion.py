"""Metric-derived method weights and the Weighted Average explanation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .attributions import AttributionMap

COMPLEXITY_EPS = 1e-8


@dataclass(frozen=True)
class WeightVector:
    methods: tuple[str, ...]
    weights: np.ndarray  # sums to 1
    avg_faith: np.ndarray
    avg_compx: np.ndarray
    l1: float
    l2: float

    def __getitem__(self, method: str) -> float:
        return float(self.weights[self.methods.index(method)])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.methods, map(float, self.weights)))


def _minmax(v: np.ndarray) -> np.ndarray:
    lo, hi = v.min(), v.max()
    return (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)


def weights_from_metrics(
    methods: Sequence[str],
    avg_faith: Sequence[float],
    avg_compx: Sequence[float],
    l1: float = 0.6,
    l2: float = 0.4,
) -> WeightVector:
    """Combine per-method average metrics into convex weights.

    Faithfulness and inverse complexity are each min-max scaled across
    methods, mixed with ``l1``/``l2``, min-max scaled again, then divided by
    their sum. If every method scores the same the weights are uniform.
    """
    if not (0 <= l1 <= 1 and 0 <= l2 <= 1):
        raise ValueError("l1 and l2 must lie in [0, 1]")
    methods = tuple(methods)
    faith = np.asarray(avg_faith, dtype=np.float64)
    compx = np.asarray(avg_compx, dtype=np.float64)
    if not (len(methods) == faith.size == compx.size) or not methods:
        raise ValueError("need one faithfulness and one complexity average per method")
    if not (np.all(np.isfinite(faith)) and np.all(np.isfinite(compx))):
        raise ValueError("metric averages must be finite")
    inv_compx = 1.0 / np.maximum(compx, COMPLEXITY_EPS)
    w = _minmax(l1 * _minmax(faith) + l2 * _minmax(inv_compx))
    if w.sum() <= 0:
        w = np.ones_like(w)
    return WeightVector(methods, w / w.sum(), faith, compx, l1, l2)


def calibrate_weights(
    scores: Mapping[str, Sequence[tuple[float, float]]], l1: float = 0.6, l2: float = 0.4
) -> WeightVector:
    """Weights from per-method lists of (faithfulness, complexity) on calibration instances.

    Undefined (nan) scores are skipped when averaging.
    """
    if not scores:
        raise ValueError("calibration needs at least one method")
    methods, faith, compx = [], [], []
    for method, pairs in scores.items():
        arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
        if not len(arr):
            raise ValueError(f"no calibration instances for {method}")
        f, c = arr[:, 0], arr[:, 1]
        methods.append(method)
        faith.append(np.nanmean(f) if np.isfinite(f).any() else 0.0)
        compx.append(np.nanmean(c) if np.isfinite(c).any() else math.log(2))
    return weights_from_metrics(methods, faith, compx, l1, l2)


def weighted_average(
    maps: Sequence[AttributionMap], weights: WeightVector, instance: str = "", normalize: bool = False
) -> AttributionMap:
    """Pixelwise convex combination of the methods' maps, in ``weights.methods`` order.

    With ``normalize`` each map is first divided by its maximum so methods
    with large raw magnitudes do not swamp the average.
    """
    by_method = {m.method: m for m in maps}
    missing = [m for m in weights.methods if m not in by_method]
    if missing:
        raise ValueError(f"missing maps for {missing}")
    if abs(weights.weights.sum() - 1.0) > 1e-6:
        raise ValueError("weights must sum to 1")
    shapes = {by_method[m].shape for m in weights.methods}
    if len(shapes) != 1:
        raise ValueError(f"map shapes differ: {sorted(shapes)}")
    stack = np.stack([by_method[m].scores.astype(np.float64) for m in weights.methods])
    if normalize:
        peak = stack.max(axis=(1, 2), keepdims=True)
        stack = np.divide(stack, peak, out=np.zeros_like(stack), where=peak > 0)
    out = np.tensordot(weights.weights, stack, axes=1)
    target = by_method[weights.methods[0]].target
    return AttributionMap(np.maximum(out, 0.0), "weighted_average", target, instance, pre_clamp=out)
