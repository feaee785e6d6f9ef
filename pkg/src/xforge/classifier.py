"""Compact residual CNN classifier: the model every explanation targets."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data.augment import AugmentConfig, augment_batch, zca_fit
from .data.records import DatasetSplit
from .engine import AdamState, Tape, Tensor, adam_step, backward, load_tensors, no_record, save_tensors
from .engine import functional as F
from .engine.checkpoint import FormatError
from .nn import Module, he_conv, he_dense
from .training import EarlyStopper, TrainSchedule

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassifierConfig:
    input_shape: tuple[int, int, int] = (3, 32, 32)
    blocks: int = 3
    width: int = 12
    num_classes: int = 3

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.width < 4:
            raise ValueError("width must be >= 4")
        if self.blocks < 1:
            raise ValueError("need at least one residual block")
        factor = 2 ** (self.blocks - 1)
        if any(n % factor or n < factor for n in self.input_shape[1:]):
            raise ValueError(f"input {self.input_shape[1:]} too small or not divisible for {self.blocks} stages")


class ResidualClassifier(Module):
    """stem conv -> residual blocks with 2x average-pool between stages -> GAP -> dense.

    Downsampling uses average pooling so the network stays piecewise linear
    in relu only, which DeepLift's rescale rule covers exactly.
    """

    def __init__(self, config: ClassifierConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        c, w = config.input_shape[0], config.width
        self.param("stem.w", he_conv(rng, w, c, 3))
        self.param("stem.b", np.zeros(w))
        for i in range(config.blocks):
            self.param(f"block{i}.conv1.w", he_conv(rng, w, w, 3))
            self.param(f"block{i}.conv1.b", np.zeros(w))
            # small second-conv init keeps the residual path near identity at start
            self.param(f"block{i}.conv2.w", 0.5 * he_conv(rng, w, w, 3))
            self.param(f"block{i}.conv2.b", np.zeros(w))
        self.param("head.w", he_dense(rng, w, config.num_classes) * 0.5)
        self.param("head.b", np.zeros(config.num_classes))
        self.whitening: tuple[Tensor, Tensor] | None = None

    def set_whitening(self, mean: np.ndarray, matrix: np.ndarray) -> None:
        """Install a fixed input whitening (not a trainable parameter)."""
        self.whitening = (Tensor(mean.reshape(1, -1)), Tensor(matrix))

    def forward(self, x: Tensor, activations: list | None = None) -> Tensor:
        p = self._params
        if self.whitening is not None:
            shape = x.shape
            mean, matrix = self.whitening
            x = F.dense(x.reshape(shape[0], -1) - mean, matrix).reshape(shape)
        h = F.relu(F.conv2d(x, p["stem.w"], p["stem.b"]))
        for i in range(self.config.blocks):
            if i > 0:
                h = F.avgpool(h, window=2)
            r = F.relu(F.conv2d(h, p[f"block{i}.conv1.w"], p[f"block{i}.conv1.b"]))
            r = F.conv2d(r, p[f"block{i}.conv2.w"], p[f"block{i}.conv2.b"])
            h = F.relu(h + r)
            if activations is not None:
                activations.append(h)
        return F.dense(F.avgpool(h), p["head.w"], p["head.b"])


def build_classifier(config: ClassifierConfig, seed: int = 0) -> ResidualClassifier:
    return ResidualClassifier(config, seed)


def _check_input(model, x: np.ndarray) -> None:
    cfg = getattr(model, "config", None)
    if cfg is not None and tuple(x.shape[1:]) != tuple(cfg.input_shape):
        raise ValueError(f"input shape {tuple(x.shape[1:])} does not match model input {cfg.input_shape}")


def predict_logits(model, batch: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Forward pass without recording; (N, C, H, W) -> (N, classes)."""
    batch = np.asarray(batch, dtype=np.float32)
    _check_input(model, batch)
    out = []
    with no_record():
        for start in range(0, len(batch), chunk):
            out.append(model(Tensor(batch[start : start + chunk])).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes), np.float32)


def predict_class_score(model, x: np.ndarray, cls: int) -> float:
    """Pre-softmax logit of ``cls`` for a single input (C, H, W)."""
    n = model.config.num_classes
    if not 0 <= cls < n:
        raise ValueError(f"class index {cls} out of range [0, {n})")
    return float(predict_logits(model, np.asarray(x)[None])[0, cls])


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(F.log_softmax(logits) * Tensor(onehot)).sum() / float(len(labels))


def evaluate(model, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Mean cross-entropy and accuracy."""
    logits = predict_logits(model, x).astype(np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(y)), y].mean())
    acc = float((logits.argmax(axis=1) == y).mean())
    return loss, acc


@dataclass
class Checkpoint:
    config: ClassifierConfig
    params: dict[str, np.ndarray]
    curves: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def model(self) -> ResidualClassifier:
        m = ResidualClassifier(self.config)
        state = {k: v for k, v in self.params.items() if not k.startswith("zca.")}
        m.load_state_dict(state)
        if "zca.mean" in self.params:
            m.set_whitening(self.params["zca.mean"], self.params["zca.matrix"])
        return m


def _snapshot(model: ResidualClassifier) -> dict[str, np.ndarray]:
    state = model.state_dict()
    if model.whitening is not None:
        state["zca.mean"] = model.whitening[0].data.reshape(-1).copy()
        state["zca.matrix"] = model.whitening[1].data.copy()
    return state


def train_classifier(
    model: ResidualClassifier,
    split: DatasetSplit,
    schedule: TrainSchedule,
    augment: AugmentConfig | None = None,
) -> Checkpoint:
    """Adam on cross-entropy with step decay, early stopping and best-state retention."""
    if len(split.train) == 0 or len(split.validation) == 0:
        raise ValueError("train and validation splits must be non-empty")
    augment = augment or AugmentConfig(rotation=0.0, shift=0.0)
    if augment.zca and model.whitening is None:
        t = zca_fit(split.train.x, augment.zca_epsilon)
        model.set_whitening(t.mean.astype(np.float32), t.matrix.astype(np.float32))
    rng = np.random.default_rng(schedule.seed)
    params = list(model.parameters().values())
    state = AdamState(lr=schedule.lr).init(params)
    stopper = EarlyStopper(schedule.patience, schedule.stop_after)
    best = _snapshot(model)
    curves: list[dict] = []
    diverged = False
    x_train, y_train = split.train.x, split.train.y
    for epoch in range(schedule.max_epochs):
        state.lr = schedule.lr_at(epoch)
        order = rng.permutation(len(y_train))
        total, correct, seen = 0.0, 0, 0
        for start in range(0, len(order), schedule.batch_size):
            idx = order[start : start + schedule.batch_size]
            xb = augment_batch(x_train[idx], augment, rng)
            with Tape() as tape:
                logits = model(Tensor(xb))
                loss = cross_entropy(logits, y_train[idx])
            value = loss.item()
            if not math.isfinite(value):
                diverged = True
                break
            grads = backward(tape, loss)
            adam_step(params, [grads[p.id] for p in params], state)
            total += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == y_train[idx]).sum())
            seen += len(idx)
        if diverged:
            log.warning("non-finite loss at epoch %d; keeping last finite best state", epoch)
            break
        # running averages over the epoch's (augmented) batches
        train_loss, train_acc = total / seen, correct / seen
        val_loss, val_acc = evaluate(model, split.validation.x, split.validation.y)
        stop = stopper.step(epoch, val_loss)
        if stopper.improved_last:
            best = _snapshot(model)
        curves.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "train_acc": train_acc,
                "val_acc": val_acc,
                "lr": state.lr,
                "best_val_loss": stopper.best,
            }
        )
        log.info("epoch %d lr %.2g train %.4f/%.3f val %.4f/%.3f", epoch, state.lr, train_loss, train_acc, val_loss, val_acc)
        if stop:
            break
    model.load_state_dict({k: v for k, v in best.items() if not k.startswith("zca.")})
    test_loss, test_acc = evaluate(model, split.test.x, split.test.y)
    metrics = {
        "test_loss": test_loss,
        "test_acc": test_acc,
        "best_epoch": stopper.best_epoch,
        "best_val_loss": stopper.best,
        "epochs_run": len(curves),
        "diverged": diverged,
    }
    return Checkpoint(model.config, best, curves, metrics)


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    """XFTN parameters at ``path`` plus ``path.json`` with config, curves and metrics."""
    path = Path(path)
    save_tensors(path, checkpoint.params)
    meta = {
        "kind": "classifier",
        "config": asdict(checkpoint.config),
        "curves": checkpoint.curves,
        "metrics": checkpoint.metrics,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    params = load_tensors(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    if not sidecar.exists():
        raise FormatError(f"{path}: missing metadata sidecar {sidecar.name}")
    meta = json.loads(sidecar.read_text())
    config = ClassifierConfig(**meta["config"])
    ckpt = Checkpoint(config, params, meta.get("curves", []), meta.get("metrics", {}))
    ckpt.model()  # validates parameter names and shapes against the config
    return ckpt
