"""Explanation quality metrics: faithfulness, complexity, SSIM and group statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .attributions import AttributionMap, PatchPartition, class_scores


class MetricError(ValueError):
    pass


def _scores(m) -> np.ndarray:
    if isinstance(m, AttributionMap):
        return m.scores.astype(np.float64)
    return np.asarray(m, dtype=np.float64)


# ---------------------------------------------------------------- correlation


def pearson(u, v) -> float:
    """Sample Pearson correlation; ``nan`` when either side has zero variance."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise MetricError(f"length mismatch: {u.size} vs {v.size}")
    if u.size < 3:
        raise MetricError("pearson needs at least 3 pairs")
    du, dv = u - u.mean(), v - v.mean()
    su, sv = math.sqrt(du @ du), math.sqrt(dv @ dv)
    # relative guard so float noise on a constant sequence counts as zero variance
    if su <= 1e-12 * max(1.0, np.abs(u).max()) or sv <= 1e-12 * max(1.0, np.abs(v).max()):
        return math.nan
    return float(np.clip((du @ dv) / (su * sv), -1.0, 1.0))


# ---------------------------------------------------------------- faithfulness


@dataclass(frozen=True)
class FaithfulnessConfig:
    """Random-subset perturbation protocol for faithfulness.

    ``subset_size`` defaults to a quarter of the feature count.
    """

    perturbations: int = 70
    subset_size: int | None = None
    baseline: float = 0.0
    partition: PatchPartition | None = None
    seed: int = 0

    def resolve(self, height: int, width: int) -> FaithfulnessConfig:
        part = self.partition or PatchPartition.default(height, width)
        size = self.subset_size if self.subset_size is not None else int(round(0.25 * part.d))
        cfg = FaithfulnessConfig(self.perturbations, size, self.baseline, part, self.seed)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.perturbations < 3:
            raise MetricError("need at least 3 perturbations")
        if self.partition is not None and self.subset_size is not None:
            if not 1 <= self.subset_size < self.partition.d:
                raise MetricError(f"subset size must be in [1, {self.partition.d}), got {self.subset_size}")


@dataclass
class Perturbations:
    """Subsets drawn for one instance and the model-output drops they cause."""

    subsets: np.ndarray  # (n, k) feature indices
    deltas: np.ndarray  # (n,) f(x) - f(x[S <- baseline])
    partition: PatchPartition

    def subset_sums(self, scores: np.ndarray) -> np.ndarray:
        g = self.partition.aggregate(scores)
        return g[self.subsets].sum(axis=1)


def draw_subsets(d: int, size: int, n: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([rng.choice(d, size=size, replace=False) for _ in range(n)])


def perturb(model, x: np.ndarray, target: int, cfg: FaithfulnessConfig) -> Perturbations:
    """Draw the subsets and evaluate the model on each perturbed input."""
    x = np.asarray(x, dtype=np.float32)
    cfg = cfg.resolve(*x.shape[-2:])
    part = cfg.partition
    rng = np.random.default_rng(cfg.seed)
    subsets = draw_subsets(part.d, cfg.subset_size, cfg.perturbations, rng)
    batch = np.repeat(x[None], len(subsets) + 1, axis=0)
    for i, s in enumerate(subsets, start=1):
        batch[i][:, part.mask(s)] = cfg.baseline
    f = class_scores(model, batch, target)
    return Perturbations(subsets, f[0] - f[1:], part)


def faithfulness(
    model, attribution, x, target: int, cfg: FaithfulnessConfig | None = None, perturbations: Perturbations | None = None
) -> float:
    """Pearson correlation between subset attribution sums and output drops.

    Pass precomputed ``perturbations`` to score several maps of one instance
    against the same draws. Returns ``nan`` when undefined.
    """
    scores = _scores(attribution)
    if perturbations is None:
        perturbations = perturb(model, x, target, cfg or FaithfulnessConfig())
    part = perturbations.partition
    if scores.shape != (part.height, part.width):
        raise MetricError(f"map shape {scores.shape} does not match input {(part.height, part.width)}")
    return pearson(perturbations.subset_sums(scores), perturbations.deltas)


# ---------------------------------------------------------------- complexity


def attribution_distribution(attribution, partition: PatchPartition | None = None) -> np.ndarray:
    scores = _scores(attribution)
    partition = partition or PatchPartition.default(*scores.shape)
    g = np.abs(partition.aggregate(scores))
    total = g.sum()
    if not total > 0:
        raise MetricError("attribution distribution undefined for an all-zero map")
    return g / total


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def complexity(attribution, partition: PatchPartition | None = None) -> float:
    """Shannon entropy (nats) of the per-feature attribution distribution."""
    return entropy(attribution_distribution(attribution, partition))


# ---------------------------------------------------------------- SSIM


@dataclass(frozen=True)
class SsimParams:
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03
    window: str = "global"  # or "sliding"
    size: int = 8

    def __post_init__(self):
        if self.dynamic_range <= 0 or self.k1 <= 0 or self.k2 <= 0:
            raise MetricError("SSIM stabilizers must be positive")
        if self.window not in ("global", "sliding"):
            raise MetricError(f"unknown SSIM window {self.window!r}")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def _ssim_stats(mx, my, vx, vy, cxy, c1, c2):
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))


def minmax(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


def ssim(x, y, params: SsimParams | None = None, normalize: bool = False) -> float:
    """Structural similarity of two maps (global window by default).

    ``normalize`` min-max scales both maps to [0, 1] first, which is how
    unitless attribution maps are compared.
    """
    params = params or SsimParams()
    x, y = _scores(x), _scores(y)
    if x.shape != y.shape:
        raise MetricError(f"SSIM shape mismatch: {x.shape} vs {y.shape}")
    if normalize:
        x, y = minmax(x), minmax(y)
    if params.window == "global":
        mx, my = x.mean(), y.mean()
        vx, vy = x.var(), y.var()
        cxy = ((x - mx) * (y - my)).mean()
        return float(_ssim_stats(mx, my, vx, vy, cxy, params.c1, params.c2))
    k = params.size
    if min(x.shape) < k:
        raise MetricError(f"maps smaller than the {k}x{k} window")
    wx = np.lib.stride_tricks.sliding_window_view(x, (k, k))
    wy = np.lib.stride_tricks.sliding_window_view(y, (k, k))
    mx, my = wx.mean(axis=(-1, -2)), wy.mean(axis=(-1, -2))
    vx, vy = wx.var(axis=(-1, -2)), wy.var(axis=(-1, -2))
    cxy = ((wx - mx[..., None, None]) * (wy - my[..., None, None])).mean(axis=(-1, -2))
    return float(_ssim_stats(mx, my, vx, vy, cxy, params.c1, params.c2).mean())


# ---------------------------------------------------------------- statistics


@dataclass(frozen=True)
class StatTestResult:
    statistic: float
    dof: int
    pvalue: float
    labels: tuple[str, ...] = ()


def kruskal_wallis(groups: Sequence[Sequence[float]], labels: Sequence[str] | None = None) -> StatTestResult:
    """Rank-based H test with tie correction; chi-square upper-tail p-value."""
    arrays = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    arrays = [a[np.isfinite(a)] for a in arrays]
    if len(arrays) < 2 or any(a.size < 2 for a in arrays):
        raise MetricError("need at least 2 groups of at least 2 finite observations")
    labels = tuple(labels) if labels is not None else tuple(str(i) for i in range(len(arrays)))
    pooled = np.concatenate(arrays)
    n = pooled.size
    dof = len(arrays) - 1
    if np.all(pooled == pooled[0]):
        return StatTestResult(0.0, dof, 1.0, labels)
    ranks = stats.rankdata(pooled)
    h, start = 0.0, 0
    for a in arrays:
        r = ranks[start : start + a.size]
        h += r.sum() ** 2 / a.size
        start += a.size
    h = 12.0 / (n * (n + 1)) * h - 3 * (n + 1)
    _, counts = np.unique(pooled, return_counts=True)
    h /= 1.0 - (counts**3 - counts).sum() / (n**3 - n)
    h = max(h, 0.0)
    return StatTestResult(float(h), dof, float(stats.chi2.sf(h, dof)), labels)


@dataclass
class SummaryRow:
    method: str
    count: int
    undefined: int
    mean: float
    median: float
    q1: float
    q3: float
    minimum: float
    maximum: float


def summarize(scores: Mapping[str, Sequence[float]]) -> list[SummaryRow]:
    """Per-method statistics; ``nan`` entries count as undefined and are excluded."""
    rows = []
    for method, values in scores.items():
        v = np.asarray(values, dtype=np.float64)
        ok = v[np.isfinite(v)]
        if ok.size:
            q1, med, q3 = np.percentile(ok, [25, 50, 75])
            stats_ = (float(ok.mean()), float(med), float(q1), float(q3), float(ok.min()), float(ok.max()))
        else:
            stats_ = (math.nan,) * 6
        rows.append(SummaryRow(method, int(ok.size), int(v.size - ok.size), *stats_))
    return rows


@dataclass
class InstanceScore:
    instance: str
    method: str
    faithfulness: float
    complexity: float

    @property
    def undefined(self) -> bool:
        return not (math.isfinite(self.faithfulness) and math.isfinite(self.complexity))


@dataclass
class MetricReport:
    rows: list[InstanceScore] = field(default_factory=list)

    def by_method(self, metric: str) -> dict[str, list[float]]:
        out: dict[str, list[float]] = {}
        for r in self.rows:
            out.setdefault(r.method, []).append(getattr(r, metric))
        return out

    def summary(self, metric: str) -> list[SummaryRow]:
        return summarize(self.by_method(metric))

    def mean(self, method: str, metric: str) -> float:
        v = np.asarray(self.by_method(metric).get(method, []), dtype=np.float64)
        v = v[np.isfinite(v)]
        return float(v.mean()) if v.size else math.nan


def score_map(model, attribution, x, target: int, perturbations: Perturbations) -> tuple[float, float]:
    """(faithfulness, complexity); complexity is ``nan`` for an all-zero map."""
    faith = faithfulness(model, attribution, x, target, perturbations=perturbations)
    try:
        compx = complexity(attribution, perturbations.partition)
    except MetricError:
        compx = math.nan
    return faith, compx
