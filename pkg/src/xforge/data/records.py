"""Record and split containers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..engine.checkpoint import load_tensors, save_tensors

SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


@dataclass
class ImageRecord:
    pixels: np.ndarray  # (C, H, W)
    label: int


@dataclass
class Subset:
    x: np.ndarray  # (N, C, H, W) float32
    y: np.ndarray  # (N,) int64
    index: np.ndarray = field(default=None)  # positions in the pooled source

    def __post_init__(self):
        if self.index is None:
            self.index = np.arange(len(self.y))

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> ImageRecord:
        return ImageRecord(self.x[i], int(self.y[i]))

    def records(self) -> list[ImageRecord]:
        return [self[i] for i in range(len(self))]


@dataclass
class DatasetSplit:
    train: Subset
    validation: Subset
    test: Subset
    class_names: list[str]
    seed: int

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.train.x.shape[1:])

    def part(self, name: str) -> Subset:
        aliases = {"train": self.train, "val": self.validation, "validation": self.validation, "test": self.test}
        try:
            return aliases[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}; expected train, validation or test") from None


def split_sizes(n: int, fractions=SPLIT_FRACTIONS) -> tuple[int, int, int]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return n_train, n_val, n - n_train - n_val


def make_split(x: np.ndarray, y: np.ndarray, class_names: list[str], seed: int) -> DatasetSplit:
    """Shuffle the pool with ``seed`` and cut it 60/20/20."""
    if len(y) == 0:
        raise ValueError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(len(y))
    n_train, n_val, _ = split_sizes(len(y))
    parts = np.split(order, [n_train, n_train + n_val])
    subsets = [Subset(x[idx], y[idx], idx) for idx in parts]
    return DatasetSplit(*subsets, class_names=list(class_names), seed=seed)


def save_split(path: str | Path, split: DatasetSplit) -> None:
    """Persist a split as an XFTN container plus a JSON header sidecar."""
    path = Path(path)
    tensors = {}
    for name in ("train", "validation", "test"):
        sub = split.part(name)
        tensors[f"{name}.x"] = sub.x
        tensors[f"{name}.y"] = sub.y.astype(np.float32)
        tensors[f"{name}.index"] = sub.index.astype(np.float32)
    save_tensors(path, tensors)
    header = {"class_names": split.class_names, "seed": split.seed}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(header, indent=2))


def load_split(path: str | Path) -> DatasetSplit:
    path = Path(path)
    t = load_tensors(path)
    header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    subs = [
        Subset(t[f"{n}.x"], t[f"{n}.y"].astype(np.int64), t[f"{n}.index"].astype(np.int64))
        for n in ("train", "validation", "test")
    ]
    return DatasetSplit(*subs, class_names=header["class_names"], seed=int(header["seed"]))
