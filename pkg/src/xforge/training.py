"""Learning-rate schedule and early stopping shared by both training loops."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class TrainSchedule:
    """Fixed-then-decay learning rate with early stopping on validation loss.

    The rate is ``lr`` for epochs ``[0, plateau)``; from epoch ``plateau`` on it
    is multiplied by ``decay`` once, and again every ``decay_every`` epochs.
    Early stopping only engages from epoch ``stop_after`` on.
    """

    lr: float = 3e-3
    max_epochs: int = 30
    plateau: int = 20
    decay_every: int = 5
    decay: float = 0.1
    patience: int = 5
    stop_after: int = 0
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay factor {self.decay} outside (0, 1]")
        if self.patience > self.max_epochs:
            raise ValueError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        if self.lr <= 0 or self.max_epochs < 1 or self.batch_size < 1 or self.decay_every < 1:
            raise ValueError("lr, max_epochs, batch_size and decay_every must be positive")

    def lr_at(self, epoch: int) -> float:
        if epoch < self.plateau:
            return self.lr
        return self.lr * self.decay ** (1 + (epoch - self.plateau) // self.decay_every)


class EarlyStopper:
    """Tracks the best validation loss; ``step`` returns True when training should stop."""

    def __init__(self, patience: int, stop_after: int = 0):
        self.patience = patience
        self.stop_after = stop_after
        self.best = float("inf")
        self.best_epoch = -1
        self.bad_epochs = 0

    def step(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return epoch >= self.stop_after and self.bad_epochs >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.bad_epochs == 0
