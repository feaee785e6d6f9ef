"""Explanation optimizer: a small U-Net that fuses baseline maps into one explanation.

The network reads the K baseline maps plus the Weighted Average as K+1
channels and emits a low-resolution map (input size) and a high-resolution
map (twice the size). It is trained on a composite loss of negative
faithfulness, complexity and SSIM similarity to the Weighted Average.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .attributions import AttributionMap, PatchPartition
from .engine import AdamState, FormatError, Tape, Tensor, adam_step, backward, load_tensors, no_record, save_tensors
from .engine import functional as F
from .metrics import Perturbations, minmax
from .nn import Module, he_conv
from .training import EarlyStopper

log = logging.getLogger(__name__)

# Guards far below any real map magnitude keep the in-loss metrics scale-free,
# so shrinking the whole map toward zero earns no complexity reduction.
# They stay above ~1e-19 so that their squares survive float32 backward passes.
PEARSON_EPS = 1e-15
MASS_EPS = 1e-15
RANGE_EPS = 1e-15


# ---------------------------------------------------------------- network


@dataclass(frozen=True)
class OptimizerNetConfig:
    channels: int = 9  # K baseline maps + the Weighted Average
    width: int = 16
    image_size: tuple[int, int] = (32, 32)

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if self.channels < 2:
            raise ValueError("need at least one baseline map plus the Weighted Average")
        if self.width < 2:
            raise ValueError("width must be >= 2")
        if any(n % 4 or n <= 0 for n in self.image_size):
            raise ValueError(f"input resolution {self.image_size} must be divisible by 4")


class OptimizerNet(Module):
    """Two-level U-Net with a 1x1 softplus LR head and a stride-2 transposed-conv HR head."""

    def __init__(self, config: OptimizerNetConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        c, w = config.channels, config.width
        layers = {
            "enc1a": (c, w),
            "enc1b": (w, w),
            "enc2a": (w, 2 * w),
            "enc2b": (2 * w, 2 * w),
            "mid_a": (2 * w, 4 * w),
            "mid_b": (4 * w, 4 * w),
            "dec2a": (4 * w + 2 * w, 2 * w),
            "dec2b": (2 * w, 2 * w),
            "dec1a": (2 * w + w + c, w),
            "dec1b": (w, w),
        }
        for name, (cin, cout) in layers.items():
            self.param(f"{name}.w", he_conv(rng, cout, cin, 3))
            self.param(f"{name}.b", np.zeros(cout))
        self.layer_names = tuple(layers)
        self.param("lr_head.w", he_conv(rng, 1, w, 1) * 0.1)
        self.param("lr_head.b", np.zeros(1))
        self.param("hr_head.w", rng.normal(0.0, 0.1 / math.sqrt(w + 1), size=(w + 1, 1, 2, 2)))
        self.param("hr_head.b", np.zeros(1))
        self.trained = False

    def _block(self, x: Tensor, a: str, b: str) -> Tensor:
        p = self._params
        x = F.relu(F.conv2d(x, p[f"{a}.w"], p[f"{a}.b"]))
        return F.relu(F.conv2d(x, p[f"{b}.w"], p[f"{b}.b"]))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.ndim != 4 or x.shape[1] != self.config.channels:
            raise ValueError(f"expected (B, {self.config.channels}, H, W), got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"input resolution {x.shape[2:]} must be divisible by 4")
        p = self._params
        e1 = self._block(x, "enc1a", "enc1b")
        e2 = self._block(F.maxpool2x2(e1), "enc2a", "enc2b")
        mid = self._block(F.maxpool2x2(e2), "mid_a", "mid_b")
        d2 = self._block(F.concat_channels(F.upsample2x(mid), e2), "dec2a", "dec2b")
        d1 = self._block(F.concat_channels(F.upsample2x(d2), e1, x), "dec1a", "dec1b")
        lr = F.softplus(F.conv2d(d1, p["lr_head.w"], p["lr_head.b"]))
        hr = F.softplus(F.transposed_conv2d(F.concat_channels(d1, lr), p["hr_head.w"], p["hr_head.b"], stride=2))
        return lr, hr


def build_optimizer_net(k: int, width: int = 16, image_size=(32, 32), seed: int = 0) -> OptimizerNet:
    if k < 1:
        raise ValueError("need at least one baseline method")
    return OptimizerNet(OptimizerNetConfig(k + 1, width, image_size), seed)


# ---------------------------------------------------------------- inputs


def stack_inputs(maps: Sequence[AttributionMap], wet: AttributionMap, order: Sequence[str]) -> np.ndarray:
    """(K+1, H, W) stack in ``order`` followed by the Weighted Average, each channel min-max scaled."""
    by_method = {m.method: m for m in maps}
    missing = [name for name in order if name not in by_method]
    if missing:
        raise ValueError(f"missing maps for {missing}")
    channels = [by_method[name].scores for name in order] + [wet.scores]
    shapes = {c.shape for c in channels}
    if len(shapes) != 1:
        raise ValueError(f"map shapes differ: {sorted(shapes)}")
    return np.stack([minmax(c) for c in channels]).astype(np.float32)


def _cubic(t: np.ndarray, a: float = -0.75) -> np.ndarray:
    t = np.abs(t)
    return np.where(
        t <= 1,
        (a + 2) * t**3 - (a + 3) * t**2 + 1,
        np.where(t < 2, a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a, 0.0),
    )


@lru_cache(maxsize=32)
def cubic_resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) half-pixel bicubic interpolation with clamped borders."""
    centers = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    base = np.floor(centers).astype(int)
    m = np.zeros((n_out, n_in))
    for offset in range(-1, 3):
        idx = base + offset
        wts = _cubic(centers - idx)
        np.add.at(m, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), wts)
    m.setflags(write=False)
    return m


def upsample2x_reference(wet) -> np.ndarray:
    """Bicubic 2x upsampling of an (H, W) map."""
    a = wet.scores if isinstance(wet, AttributionMap) else np.asarray(wet, dtype=np.float64)
    h, w = a.shape[-2:]
    return cubic_resize_matrix(h, 2 * h) @ a @ cubic_resize_matrix(w, 2 * w).T


# ---------------------------------------------------------------- loss


@dataclass(frozen=True)
class LossWeights:
    l1: float = 0.5  # faithfulness
    l2: float = 0.3  # complexity
    l3: float = 0.2  # similarity
    lambda1: float = 0.5  # LR similarity
    lambda2: float = 0.5  # HR similarity
    normalize_complexity: bool = True  # divide the entropy by ln d

    def __post_init__(self):
        for name in ("l1", "l2", "l3", "lambda1", "lambda2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass
class LossTerms:
    total: Tensor
    faithfulness: float
    complexity: float
    ssim_lr: float
    ssim_hr: float
    weights: LossWeights = field(default_factory=LossWeights)
    complexity_scale: float = 1.0  # factor applied to ``complexity`` inside the loss

    @property
    def similarity(self) -> float:
        w = self.weights
        return w.lambda1 * (1 - self.ssim_lr) + w.lambda2 * (1 - self.ssim_hr)

    def recombined(self) -> float:
        w = self.weights
        return -w.l1 * self.faithfulness + w.l2 * self.complexity_scale * self.complexity + w.l3 * self.similarity


def _flat(m: Tensor) -> Tensor:
    return m.reshape(m.shape[0], int(np.prod(m.shape[1:])))


def soft_faithfulness(lr_map: Tensor, indicators: np.ndarray, deltas: np.ndarray, membership: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Per-instance Pearson correlation between subset sums and fixed output drops.

    ``indicators`` is (B, n, d) 0/1, ``deltas`` (B, n), ``membership`` (d, H*W).
    Returns the (B,) correlations and a mask of instances whose deltas vary.
    """
    dtype = lr_map.data.dtype
    g = F.dense(_flat(lr_map), Tensor(membership.T.astype(dtype)))  # (B, d)
    b, n, d = indicators.shape
    sums = (g.reshape(b, 1, d) * Tensor(indicators.astype(dtype))).sum(axis=2)  # (B, n)
    du = sums - sums.mean(axis=1, keepdims=True)
    dv = deltas - deltas.mean(axis=1, keepdims=True)
    dv_norm = np.sqrt((dv**2).sum(axis=1))
    valid = dv_norm > 1e-12 * np.maximum(1.0, np.abs(deltas).max(axis=1))
    dv = np.where(valid[:, None], dv / np.where(valid, dv_norm, 1.0)[:, None], 0.0)
    cov = (du * Tensor(dv.astype(dtype))).sum(axis=1)
    su = F.sqrt((du * du).sum(axis=1) + PEARSON_EPS)
    return cov / su, valid


def soft_complexity(lr_map: Tensor, membership: np.ndarray) -> Tensor:
    """(B,) entropy of the per-feature mass distribution of a nonnegative map."""
    g = F.dense(_flat(lr_map), Tensor(membership.T.astype(lr_map.data.dtype)))
    p = g / (g.sum(axis=1, keepdims=True) + MASS_EPS)
    return -(p * F.log(p)).sum(axis=1)


def soft_ssim(x: Tensor, y: np.ndarray, c1: float = 1e-4, c2: float = 9e-4) -> Tensor:
    """(B,) global-window SSIM of min-max scaled maps ``x`` against references ``y``.

    ``y`` is min-max scaled here as well, so the term is blind to the map's
    overall scale (as the complexity and faithfulness terms are).
    """
    xf = _flat(x)
    lo = xf.min(axis=1, keepdims=True)
    xf = (xf - lo) / (xf.max(axis=1, keepdims=True) - lo + RANGE_EPS)
    yf = y.reshape(len(y), -1).astype(np.float64)
    ylo, yhi = yf.min(axis=1, keepdims=True), yf.max(axis=1, keepdims=True)
    yf = (yf - ylo) / np.where(yhi > ylo, yhi - ylo, 1.0)
    my = yf.mean(axis=1, keepdims=True)
    dy = yf - my
    vy = (dy**2).mean(axis=1)
    dtype = x.data.dtype
    mx = xf.mean(axis=1, keepdims=True)
    dx = xf - mx
    vx = (dx * dx).mean(axis=1)
    cxy = (dx * Tensor(dy.astype(dtype))).mean(axis=1)
    mx = mx.reshape(len(y))
    my = my.ravel().astype(dtype)
    num = (mx * Tensor(2 * my) + c1) * (cxy * 2.0 + c2)
    den = (mx * mx + Tensor(my**2 + c1)) * (vx + Tensor((vy + c2).astype(dtype)))
    return num / den


def composite_loss(
    lr_map: Tensor,
    hr_map: Tensor,
    wet: np.ndarray,
    wet_hr: np.ndarray,
    indicators: np.ndarray,
    deltas: np.ndarray,
    partition: PatchPartition,
    weights: LossWeights = LossWeights(),
) -> LossTerms:
    """-l1*faith + l2*complexity + l3*(lambda1*(1-SSIM_LR) + lambda2*(1-SSIM_HR)), batch-averaged.

    The output drops ``deltas`` are constants, so gradients reach the map
    only through the subset sums. Instances whose drops have no variance
    contribute zero faithfulness.
    """
    membership = partition.membership()
    scale = 1.0 / np.log(partition.d) if weights.normalize_complexity and partition.d > 1 else 1.0
    total = None
    faith_v = compx_v = 0.0
    ssim_lr_v = ssim_hr_v = 1.0
    if weights.l1 > 0:
        r, valid = soft_faithfulness(lr_map, indicators, deltas, membership)
        if not valid.all():
            log.warning("%d instance(s) with constant output drops; faithfulness term skipped for them", (~valid).sum())
        faith = r.sum() / float(max(valid.sum(), 1))
        faith_v = faith.item()
        total = faith * (-weights.l1)
    if weights.l2 > 0:
        compx = soft_complexity(lr_map, membership).mean()
        compx_v = compx.item()
        term = compx * (weights.l2 * scale)
        total = term if total is None else total + term
    if weights.l3 > 0:
        s_lr = soft_ssim(lr_map, wet).mean()
        s_hr = soft_ssim(hr_map, wet_hr).mean()
        ssim_lr_v, ssim_hr_v = s_lr.item(), s_hr.item()
        sim = (1.0 - s_lr) * weights.lambda1 + (1.0 - s_hr) * weights.lambda2
        total = sim * weights.l3 if total is None else total + sim * weights.l3
    if total is None:
        raise ValueError("all loss weights are zero")
    return LossTerms(total, faith_v, compx_v, ssim_lr_v, ssim_hr_v, weights, scale)


# ---------------------------------------------------------------- data and training


@dataclass
class OptimizerData:
    """Precomputed training material for a set of instances."""

    inputs: np.ndarray  # (N, K+1, H, W)
    wet: np.ndarray  # (N, H, W), min-max scaled
    wet_hr: np.ndarray  # (N, 2H, 2W)
    subsets: np.ndarray  # (N, P, k) pooled perturbation subsets
    deltas: np.ndarray  # (N, P)
    labels: np.ndarray  # (N,) explained class
    partition: PatchPartition

    def __len__(self) -> int:
        return len(self.inputs)

    def take(self, idx) -> OptimizerData:
        return OptimizerData(
            self.inputs[idx], self.wet[idx], self.wet_hr[idx], self.subsets[idx], self.deltas[idx], self.labels[idx], self.partition
        )

    def draw(self, idx: np.ndarray, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Resample ``n`` perturbations per instance from its pool as (indicators, deltas)."""
        pool = self.subsets.shape[1]
        pick = np.stack([rng.choice(pool, size=min(n, pool), replace=False) for _ in idx])
        subsets = self.subsets[idx[:, None], pick]  # (B, n, k)
        ind = np.zeros(subsets.shape[:2] + (self.partition.d,))
        np.put_along_axis(ind, subsets, 1.0, axis=2)
        return ind, self.deltas[idx[:, None], pick]

    def full(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        subsets = self.subsets[idx]
        ind = np.zeros(subsets.shape[:2] + (self.partition.d,))
        np.put_along_axis(ind, subsets, 1.0, axis=2)
        return ind, self.deltas[idx]


def make_optimizer_data(
    inputs: np.ndarray, wets: np.ndarray, perturbations: Sequence[Perturbations], labels: Sequence[int]
) -> OptimizerData:
    wet = np.stack([minmax(w) for w in wets]).astype(np.float32)
    wet_hr = np.stack([upsample2x_reference(w) for w in wet]).astype(np.float32)
    part = perturbations[0].partition
    return OptimizerData(
        np.asarray(inputs, dtype=np.float32),
        wet,
        wet_hr,
        np.stack([p.subsets for p in perturbations]),
        np.stack([p.deltas for p in perturbations]),
        np.asarray(labels, dtype=int),
        part,
    )


@dataclass(frozen=True)
class OptimizerSchedule:
    lr_grid: tuple[float, ...] = (5e-2, 5e-3, 5e-4, 5e-5)
    max_epochs: int = 150
    patience: int = 10
    stop_after: int = 90
    batch_size: int = 16
    draws_per_step: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_grid", tuple(float(v) for v in self.lr_grid))
        if not self.lr_grid or any(v <= 0 for v in self.lr_grid):
            raise ValueError("lr grid must be non-empty and positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.batch_size < 1 or self.draws_per_step < 3:
            raise ValueError("batch_size >= 1 and draws_per_step >= 3 required")


@dataclass
class OptimizerRun:
    lr: float
    state: dict[str, np.ndarray]
    best_val: float
    best_epoch: int
    curves: list[dict]
    diverged: bool = False


@dataclass
class OptimizerResult:
    net: OptimizerNet
    best: OptimizerRun
    runs: list[OptimizerRun]

    @property
    def curves(self) -> list[dict]:
        """Every epoch of every grid run, tagged with its learning rate."""
        return [row for run in self.runs for row in run.curves]


def evaluate_loss(net: OptimizerNet, data: OptimizerData, weights: LossWeights, chunk: int = 32) -> tuple[float, np.ndarray]:
    """Mean composite loss on ``data`` using each instance's full pool; also per-instance values."""
    per = []
    with no_record():
        for start in range(0, len(data), chunk):
            idx = np.arange(start, min(start + chunk, len(data)))
            lr, hr = net(Tensor(data.inputs[idx]))
            ind, deltas = data.full(idx)
            for j, i in enumerate(idx):
                terms = composite_loss(
                    Tensor(lr.data[j : j + 1]),
                    Tensor(hr.data[j : j + 1]),
                    data.wet[i : i + 1],
                    data.wet_hr[i : i + 1],
                    ind[j : j + 1],
                    deltas[j : j + 1],
                    data.partition,
                    weights,
                )
                per.append(terms.total.item())
    per = np.asarray(per)
    return float(per.mean()), per


def _train_once(
    net: OptimizerNet,
    train: OptimizerData,
    val: OptimizerData,
    weights: LossWeights,
    schedule: OptimizerSchedule,
    lr: float,
    classes: Sequence[int],
) -> OptimizerRun:
    rng = np.random.default_rng(schedule.seed)
    params = list(net.parameters().values())
    adam = AdamState(lr=lr).init(params)
    stopper = EarlyStopper(schedule.patience, schedule.stop_after)
    best_state = net.state_dict()
    curves: list[dict] = []
    diverged = False
    for epoch in range(schedule.max_epochs):
        order = rng.permutation(len(train))
        total, seen = 0.0, 0
        terms_sum = np.zeros(4)
        for start in range(0, len(order), schedule.batch_size):
            idx = order[start : start + schedule.batch_size]
            ind, deltas = train.draw(idx, schedule.draws_per_step, rng)
            with Tape() as tape:
                lr_map, hr_map = net(Tensor(train.inputs[idx]))
                terms = composite_loss(lr_map, hr_map, train.wet[idx], train.wet_hr[idx], ind, deltas, train.partition, weights)
            value = terms.total.item()
            if not math.isfinite(value):
                diverged = True
                break
            grads = backward(tape, terms.total)
            adam_step(params, [grads[p.id] for p in params], adam)
            total += value * len(idx)
            terms_sum += len(idx) * np.array([terms.faithfulness, terms.complexity, terms.ssim_lr, terms.ssim_hr])
            seen += len(idx)
        if diverged:
            log.warning("optimizer diverged at epoch %d (lr %g); keeping best state", epoch, lr)
            break
        val_loss, per = evaluate_loss(net, val, weights)
        stop = stopper.step(epoch, val_loss)
        if stopper.improved_last:
            best_state = net.state_dict()
        row = {"lr": lr, "epoch": epoch, "train_loss": total / seen, "val_loss": val_loss}
        row.update(zip(("train_faith", "train_compx", "train_ssim_lr", "train_ssim_hr"), (terms_sum / seen).tolist()))
        for c in classes:
            sel = val.labels == c
            row[f"val_loss_class{c}"] = float(per[sel].mean()) if sel.any() else math.nan
        curves.append(row)
        log.info("optimizer lr %g epoch %d train %.4f val %.4f", lr, epoch, row["train_loss"], val_loss)
        if stop:
            break
    return OptimizerRun(lr, best_state, stopper.best, stopper.best_epoch, curves, diverged)


def train_optimizer(
    net: OptimizerNet,
    train: OptimizerData,
    val: OptimizerData,
    weights: LossWeights = LossWeights(),
    schedule: OptimizerSchedule = OptimizerSchedule(),
) -> OptimizerResult:
    """Train from the same initialization at each grid learning rate; keep the best validation run."""
    if len(train) == 0 or len(val) == 0:
        raise ValueError("optimizer needs non-empty train and validation instances")
    init = net.state_dict()
    classes = sorted(set(train.labels.tolist()) | set(val.labels.tolist()))
    runs = []
    for lr in schedule.lr_grid:
        net.load_state_dict(init)
        runs.append(_train_once(net, train, val, weights, schedule, lr, classes))
    finite = [r for r in runs if math.isfinite(r.best_val)]
    if not finite:
        raise RuntimeError("every learning rate diverged")
    best = min(finite, key=lambda r: r.best_val)
    net.load_state_dict(best.state)
    net.trained = True
    return OptimizerResult(net, best, runs)


@dataclass
class ExplanationPair:
    lr: np.ndarray  # (H, W)
    hr: np.ndarray  # (2H, 2W)


def explain_optimal(net: OptimizerNet, inputs: np.ndarray) -> list[ExplanationPair]:
    """Deterministic forward pass over stacked (N, K+1, H, W) or single (K+1, H, W) inputs."""
    if not net.trained:
        log.warning("explain_optimal called on an untrained optimizer network")
    inputs = np.asarray(inputs, dtype=np.float32)
    if inputs.ndim == 3:
        inputs = inputs[None]
    out = []
    with no_record():
        for start in range(0, len(inputs), 32):
            lr, hr = net(Tensor(inputs[start : start + 32]))
            out.extend(ExplanationPair(a[0].copy(), b[0].copy()) for a, b in zip(lr.data, hr.data))
    return out


def save_optimizer(net: OptimizerNet, path: str | Path, meta: dict | None = None) -> None:
    """XFTN parameters at ``path`` plus ``path.json`` with the network config."""
    path = Path(path)
    save_tensors(path, net.state_dict())
    sidecar = {"kind": "optimizer", "config": asdict(net.config), "trained": net.trained, **(meta or {})}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))


def load_optimizer(path: str | Path) -> OptimizerNet:
    path = Path(path)
    params = load_tensors(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    if not sidecar.exists():
        raise FormatError(f"{path}: missing metadata sidecar {sidecar.name}")
    meta = json.loads(sidecar.read_text())
    net = OptimizerNet(OptimizerNetConfig(**meta["config"]))
    net.load_state_dict(params)
    net.trained = bool(meta.get("trained", False))
    return net
