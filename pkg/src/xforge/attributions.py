"""Baseline attribution methods.

Every method takes ``(model, x, target)`` where ``model(Tensor)`` returns
logits ``(batch, classes)`` and ``x`` is a single ``(C, H, W)`` input. Signed
per-channel attributions are summed over channels into ``pre_clamp``; the
published ``scores`` keep only the positive part.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable

import numpy as np

from .engine import Tape, Tensor, backward, no_record
from .engine import functional as F
from .engine.ops import linear_resize_matrix, resize_separable

METHOD_NAMES = (
    "saliency",
    "deeplift",
    "kernel_shap",
    "deeplift_shap",
    "integrated_gradients",
    "guided_backprop",
    "guided_gradcam",
    "gradient_shap",
)


class AttributionError(ValueError):
    """The method is undefined for this model or input."""


@dataclass(frozen=True)
class PatchPartition:
    """Grid of ``rows x cols`` rectangular patches over an ``height x width`` image."""

    rows: int
    cols: int
    height: int
    width: int

    def __post_init__(self):
        if not (1 <= self.rows <= self.height and 1 <= self.cols <= self.width):
            raise ValueError(f"grid {self.rows}x{self.cols} does not fit {self.height}x{self.width}")

    @classmethod
    def default(cls, height: int, width: int, patch: int = 4) -> PatchPartition:
        return cls(max(1, height // patch), max(1, width // patch), height, width)

    @property
    def d(self) -> int:
        return self.rows * self.cols

    @property
    def index(self) -> np.ndarray:
        """(H, W) map from pixel to feature index in ``[0, d)``."""
        r = np.minimum(np.arange(self.height) * self.rows // self.height, self.rows - 1)
        c = np.minimum(np.arange(self.width) * self.cols // self.width, self.cols - 1)
        return r[:, None] * self.cols + c[None, :]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.index.ravel(), minlength=self.d)

    def aggregate(self, scores: np.ndarray) -> np.ndarray:
        """Per-feature sums of an (H, W) map (or (..., H, W) stack)."""
        scores = np.asarray(scores, dtype=np.float64)
        flat = scores.reshape(scores.shape[:-2] + (-1,))
        onehot = np.eye(self.d)[self.index.ravel()]  # (H*W, d)
        return flat @ onehot

    def broadcast(self, values: np.ndarray) -> np.ndarray:
        """Spread per-feature values evenly over their pixels; patch sums are preserved."""
        per_pixel = np.asarray(values, dtype=np.float64) / self.sizes
        return per_pixel[self.index]

    def mask(self, features) -> np.ndarray:
        """(H, W) boolean mask of the pixels belonging to ``features``."""
        sel = np.zeros(self.d, dtype=bool)
        sel[np.asarray(features, dtype=int)] = True
        return sel[self.index]

    def membership(self) -> np.ndarray:
        """(d, H*W) 0/1 matrix."""
        return np.eye(self.d)[self.index.ravel()].T


@dataclass
class AttributionMap:
    scores: np.ndarray  # (H, W), nonnegative
    method: str
    target: int
    instance: str = ""
    pre_clamp: np.ndarray | None = field(default=None, repr=False)
    raw: np.ndarray | None = field(default=None, repr=False)  # (C, H, W) signed, when defined

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float32)
        if self.scores.ndim != 2:
            raise ValueError(f"attribution scores must be (H, W), got {self.scores.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape


def publish(pre_clamp: np.ndarray, method: str, target: int, raw=None, instance: str = "") -> AttributionMap:
    pre = np.asarray(pre_clamp, dtype=np.float64)
    if not np.all(np.isfinite(pre)):
        raise AttributionError(f"{method}: non-finite attribution")
    return AttributionMap(np.maximum(pre, 0.0), method, target, instance, pre_clamp=pre, raw=raw)


@dataclass(frozen=True)
class BaselineSpec:
    """Reference input for path and difference methods.

    ``zero``: all-zero image. ``gaussian``: the input plus N(0, sigma^2) noise.
    ``dataset``: rows drawn from ``reference`` (an (N, C, H, W) array).
    """

    kind: str = "zero"
    sigma: float = 0.0
    samples: int = 1
    reference: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("zero", "gaussian", "dataset"):
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        if self.sigma < 0 or self.samples < 1:
            raise ValueError("sigma must be >= 0 and samples >= 1")
        if self.kind == "dataset" and (self.reference is None or len(self.reference) == 0):
            raise ValueError("dataset baseline needs a non-empty reference array")

    def draw(self, x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros((n,) + x.shape, dtype=x.dtype)
        if self.kind == "gaussian":
            return (x[None] + rng.normal(0.0, self.sigma, size=(n,) + x.shape)).astype(x.dtype)
        idx = rng.integers(0, len(self.reference), size=n)
        return np.asarray(self.reference[idx], dtype=x.dtype)


# ---------------------------------------------------------------- gradient plumbing


def _score(logits: Tensor, target: int) -> Tensor:
    n = logits.shape[1]
    if not 0 <= target < n:
        raise AttributionError(f"target class {target} out of range [0, {n})")
    return F.select(logits, target).sum()


def input_gradients(model, xb: np.ndarray, target: int, rules=None, chunk: int = 32) -> np.ndarray:
    """d logit_target / d input for each row of ``xb``."""
    out = []
    for start in range(0, len(xb), chunk):
        with Tape() as tape:
            xt = Tensor(xb[start : start + chunk])
            score = _score(model(xt), target)
        if rules is not None:
            _check_rules(tape, rules)
        out.append(backward(tape, score, rules=rules).of(xt))
    return np.concatenate(out)


def _check_rules(tape: Tape, rules) -> None:
    checker = getattr(rules, "check", None)
    if checker is not None:
        checker(tape)


def class_scores(model, xb: np.ndarray, target: int, chunk: int = 64) -> np.ndarray:
    out = []
    with no_record():
        for start in range(0, len(xb), chunk):
            out.append(model(Tensor(xb[start : start + chunk])).data[:, target])
    return np.concatenate(out).astype(np.float64)


def _as_input(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype != np.float64:
        x = x.astype(np.float32)
    if x.ndim != 3:
        raise AttributionError(f"expected a single (C, H, W) input, got {x.shape}")
    return x


# ---------------------------------------------------------------- methods


def saliency(model, x, target: int) -> AttributionMap:
    """Absolute input gradient, summed over channels."""
    x = _as_input(x)
    g = input_gradients(model, x[None], target)[0]
    if not np.all(np.isfinite(g)):
        raise AttributionError("saliency: non-finite gradient")
    raw = np.abs(g)
    return publish(raw.sum(axis=0), "saliency", target, raw=raw)


def path_alphas(steps: int, rule: str = "left") -> np.ndarray:
    if rule == "left":
        return np.arange(steps) / steps
    if rule == "midpoint":
        return (np.arange(steps) + 0.5) / steps
    raise ValueError(f"unknown quadrature rule {rule!r}")


def integrated_gradients(
    model,
    x,
    target: int,
    steps: int = 64,
    baseline: BaselineSpec | None = None,
    rule: str = "left",
    seed: int = 0,
) -> AttributionMap:
    """(x - x0) times the mean gradient on the straight path x0 -> x."""
    if steps < 8:
        raise ValueError("integrated gradients needs steps >= 8")
    x = _as_input(x)
    baseline = baseline or BaselineSpec()
    x0 = baseline.draw(x, 1, np.random.default_rng(seed))[0]
    alphas = path_alphas(steps, rule).astype(x.dtype)
    path = x0[None] + alphas[:, None, None, None] * (x - x0)[None]
    mean_grad = input_gradients(model, path, target).mean(axis=0)
    raw = (x - x0) * mean_grad
    return publish(raw.sum(axis=0), "integrated_gradients", target, raw=raw)


def gradient_shap(
    model,
    x,
    target: int,
    n_samples: int = 16,
    sigma: float = 0.1,
    steps: int = 1,
    baseline: BaselineSpec | None = None,
    seed: int = 0,
) -> AttributionMap:
    """Expected gradients over noisy inputs and random path points.

    Each sample perturbs the input with N(0, sigma^2) noise, draws a baseline,
    and evaluates the gradient at ``steps`` uniformly random points on the
    path between them.
    """
    if n_samples < 1 or steps < 1:
        raise ValueError("n_samples and steps must be positive")
    x = _as_input(x)
    rng = np.random.default_rng(seed)
    baseline = baseline or BaselineSpec()
    noisy = (x[None] + rng.normal(0.0, sigma, size=(n_samples,) + x.shape)).astype(x.dtype)
    base = baseline.draw(x, n_samples, rng)
    alphas = rng.uniform(0.0, 1.0, size=(n_samples, steps)).astype(x.dtype)
    delta = noisy - base
    points = base[:, None] + alphas[:, :, None, None, None] * delta[:, None]
    g = input_gradients(model, points.reshape((-1,) + x.shape), target).reshape(points.shape)
    raw = (g.mean(axis=1) * delta).mean(axis=0)
    return publish(raw.sum(axis=0), "gradient_shap", target, raw=raw)


class GuidedRules(dict):
    """Backward overrides: relu passes only positive gradients through open gates."""

    def __init__(self):
        super().__init__(relu=self._relu)

    @staticmethod
    def _relu(entry, g):
        return (np.maximum(g, 0) * (entry.saved["x"] > 0),)

    def check(self, tape: Tape) -> None:
        if "relu" not in tape.kinds():
            raise AttributionError("guided backpropagation is undefined for a model without relu")


def guided_backprop(model, x, target: int) -> AttributionMap:
    x = _as_input(x)
    g = input_gradients(model, x[None], target, rules=GuidedRules())[0]
    return publish(g.sum(axis=0), "guided_backprop", target, raw=g)


def resize_bilinear(maps: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel bilinear resize of the trailing two axes."""
    h, w = maps.shape[-2:]
    nd = maps.ndim
    return resize_separable(
        np.asarray(maps, dtype=np.float64),
        [linear_resize_matrix(h, size[0]), linear_resize_matrix(w, size[1])],
        (nd - 2, nd - 1),
    )


def grad_cam(model, x, target: int, layer: int = -1) -> np.ndarray:
    """relu(sum_c alpha_c A_c) at a convolutional stage, upsampled to the input size."""
    x = _as_input(x)
    acts: list[Tensor] = []
    with Tape() as tape:
        xt = Tensor(x[None])
        try:
            logits = model(xt, activations=acts)
        except TypeError:
            raise AttributionError("grad_cam needs a model that exposes convolutional activations") from None
        score = _score(logits, target)
    if not acts:
        raise AttributionError("model exposed no convolutional activations")
    if not -len(acts) <= layer < len(acts):
        raise AttributionError(f"layer index {layer} out of range for {len(acts)} stages")
    a = acts[layer]
    grads = backward(tape, score).of(a)[0].astype(np.float64)  # (C, h, w)
    alpha = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, a.data[0].astype(np.float64), axes=1), 0.0)
    return resize_bilinear(cam, x.shape[1:])


def guided_grad_cam(model, x, target: int, layer: int = -1) -> AttributionMap:
    gb = guided_backprop(model, x, target)
    cam = grad_cam(model, x, target, layer)
    return publish(gb.pre_clamp * cam, "guided_gradcam", target, raw=gb.raw * cam[None])


# ---------------------------------------------------------------- DeepLift


class RescaleRules(dict):
    """DeepLift multipliers: linear ops keep their gradient, elementwise
    nonlinearities use delta-out over delta-in against a reference pass."""

    LINEAR = frozenset(
        {
            "dense",
            "conv1d",
            "conv2d",
            "conv3d",
            "transposed_conv2d",
            "transposed_conv3d",
            "add",
            "sub",
            "scalar_mul",
            "sum",
            "mean",
            "avgpool",
            "concat_channels",
            "reshape",
            "select",
            "bilinear_upsample2x",
        }
    )
    NONLINEAR = ("relu", "leaky_relu", "sigmoid", "softplus", "exp")
    FALLBACK = 1e-7

    def __init__(self, reference: Tape):
        super().__init__({k: self._rescale for k in self.NONLINEAR})
        self.reference = reference

    def check(self, tape: Tape) -> None:
        allowed = self.LINEAR | set(self.NONLINEAR)
        for entry in tape.entries:
            if entry.kind not in allowed:
                raise AttributionError(f"DeepLift rescale has no rule for op {entry.kind!r}")
        if tape.kinds() != self.reference.kinds():
            raise AttributionError("reference pass recorded a different op sequence")

    def _rescale(self, entry, g):
        ref = self.reference.entries[entry.index]
        x, y = entry.saved["x"], entry.saved["out"]
        x0, y0 = ref.saved["x"], ref.saved["out"]
        dx = x - x0
        local = _local_derivative(entry, x, y)
        safe = np.abs(dx) >= self.FALLBACK
        m = np.where(safe, (y - y0) / np.where(safe, dx, 1.0), local)
        return (g * m.astype(g.dtype),)


def _local_derivative(entry, x, y):
    kind = entry.kind
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    if kind == "leaky_relu":
        return np.where(x > 0, 1.0, entry.params.get("slope", 0.01)).astype(x.dtype)
    if kind == "sigmoid":
        return y * (1 - y)
    if kind == "softplus":
        return 0.5 * (1.0 + np.tanh(0.5 * x))
    return y  # exp


def deeplift_multipliers(model, xb: np.ndarray, refs: np.ndarray, target: int) -> np.ndarray:
    """Rescale-rule multipliers of logit_target wrt each row of ``xb`` against ``refs``."""
    with Tape() as ref_tape:
        _score(model(Tensor(refs)), target)
    with Tape() as tape:
        xt = Tensor(xb)
        score = _score(model(xt), target)
    rules = RescaleRules(ref_tape)
    rules.check(tape)
    return backward(tape, score, rules=rules).of(xt)


def deeplift_rescale(model, x, target: int, baseline: BaselineSpec | None = None, seed: int = 0) -> AttributionMap:
    x = _as_input(x)
    x0 = (baseline or BaselineSpec()).draw(x, 1, np.random.default_rng(seed))
    m = deeplift_multipliers(model, x[None], x0, target)[0]
    raw = m * (x - x0[0])
    return publish(raw.sum(axis=0), "deeplift", target, raw=raw)


def deeplift_shap(
    model, x, target: int, reference: np.ndarray, n_samples: int = 8, seed: int = 0
) -> AttributionMap:
    """Mean DeepLift attribution over baselines drawn from ``reference``."""
    x = _as_input(x)
    reference = np.asarray(reference, dtype=x.dtype)
    if reference.ndim == 3:
        reference = reference[None]
    rng = np.random.default_rng(seed)
    if len(reference) == 1:
        refs = reference
    else:
        refs = reference[rng.choice(len(reference), size=min(n_samples, len(reference)), replace=False)]
    xb = np.broadcast_to(x, refs.shape).copy()
    m = deeplift_multipliers(model, xb, refs, target)
    raw = (m * (xb - refs)).mean(axis=0)
    return publish(raw.sum(axis=0), "deeplift_shap", target, raw=raw)


# ---------------------------------------------------------------- Kernel SHAP


def shapley_kernel(d: int, s: np.ndarray) -> np.ndarray:
    s = np.asarray(s)
    return (d - 1) / (np.array([math.comb(d, int(k)) for k in s.ravel()]).reshape(s.shape) * s * (d - s))


def all_coalitions(d: int) -> np.ndarray:
    """Every proper, non-empty coalition as a (2^d - 2, d) 0/1 matrix."""
    rows = [np.array([(m >> j) & 1 for j in range(d)]) for m in range(1, 2**d - 1)]
    return np.array(rows, dtype=np.float64)


def sample_coalitions(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Paired coalitions with sizes drawn proportional to total kernel mass."""
    sizes = np.arange(1, d)
    p = (d - 1) / (sizes * (d - sizes))
    p = p / p.sum()
    z = np.zeros((n, d))
    for i in range(0, n, 2):
        k = rng.choice(sizes, p=p)
        on = rng.choice(d, size=k, replace=False)
        z[i, on] = 1
        if i + 1 < n:
            z[i + 1] = 1 - z[i]
    return z


class SingularSystemError(AttributionError):
    pass


def solve_shapley_regression(z: np.ndarray, values: np.ndarray, weights: np.ndarray, v_empty: float, v_full: float, ridge: float) -> np.ndarray:
    """Weighted least squares for additive feature values with the efficiency constraint."""
    d = z.shape[1]
    total = v_full - v_empty
    y = values - v_empty - z[:, -1] * total
    xm = z[:, :-1] - z[:, -1:]
    a = (xm * weights[:, None]).T @ xm + ridge * np.eye(d - 1)
    b = (xm * weights[:, None]).T @ y
    if np.linalg.cond(a) > 1e12:
        raise SingularSystemError("kernel SHAP regression is singular; increase n_coalitions or ridge")
    head = np.linalg.solve(a, b)
    return np.append(head, total - head.sum())


def kernel_shap(
    model,
    x,
    target: int,
    partition: PatchPartition | None = None,
    n_coalitions: int = 256,
    ridge: float = 1e-6,
    seed: int = 0,
    value_fn: Callable[[np.ndarray], np.ndarray] | None = None,
) -> AttributionMap:
    """Patch-level Shapley estimates; off patches take the zero baseline.

    With ``n_coalitions >= 2^d - 2`` every coalition is enumerated with exact
    Shapley-kernel weights and the regression is solved without ``ridge``. ``value_fn`` replaces the model for coalition
    values (rows of 0/1 masks -> scores), which the tests use for games.
    """
    x = _as_input(x)
    partition = partition or PatchPartition.default(*x.shape[1:])
    d = partition.d
    if d < 2:
        raise ValueError("kernel SHAP needs at least two features")
    if n_coalitions < d + 2:
        raise ValueError(f"n_coalitions must be >= d + 2 = {d + 2}")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    if d <= 20 and n_coalitions >= 2**d - 2:
        z = all_coalitions(d)
        weights = shapley_kernel(d, z.sum(axis=1))
        ridge = 0.0  # exactly determined; a ridge would only bias the exact values
    else:
        z = sample_coalitions(d, n_coalitions, np.random.default_rng(seed))
        weights = np.ones(len(z))
    ends = np.vstack([np.zeros(d), np.ones(d)])
    masks = np.vstack([ends, z])
    if value_fn is None:
        member = partition.membership()  # (d, H*W)
        pix = (masks @ member).reshape((-1, 1) + x.shape[1:]).astype(x.dtype)
        values = class_scores(model, x[None] * pix, target)
    else:
        values = np.asarray(value_fn(masks), dtype=np.float64)
    phi = solve_shapley_regression(z, values[2:], weights, values[0], values[1], ridge)
    return publish(partition.broadcast(phi), "kernel_shap", target, raw=None)


# ---------------------------------------------------------------- registry


def explain(model, x, target: int, method: str, **params) -> AttributionMap:
    """Run ``method`` by name with method-specific keyword parameters."""
    fns = {
        "saliency": saliency,
        "deeplift": deeplift_rescale,
        "kernel_shap": kernel_shap,
        "deeplift_shap": deeplift_shap,
        "integrated_gradients": integrated_gradients,
        "guided_backprop": guided_backprop,
        "guided_gradcam": guided_grad_cam,
        "gradient_shap": gradient_shap,
    }
    try:
        fn = fns[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; valid: {', '.join(METHOD_NAMES)}") from None
    return fn(model, x, target, **params)
