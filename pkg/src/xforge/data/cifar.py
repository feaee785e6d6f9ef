"""Reader for the CIFAR-10 binary distribution.

Each record is one label byte followed by 3072 pixel bytes: three
row-major 32x32 planes in R, G, B order.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .records import DatasetSplit, make_split

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
CLASS_NAMES = ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"]
BATCH_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]


class CifarFormatError(ValueError):
    pass


def parse_records(buf: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Parse raw record bytes into uint8 images (N, 3, 32, 32) and labels (N,)."""
    if len(buf) % RECORD_BYTES:
        whole = len(buf) // RECORD_BYTES
        raise CifarFormatError(
            f"{source}: truncated record at byte offset {whole * RECORD_BYTES} "
            f"(size {len(buf)} is not a multiple of {RECORD_BYTES})"
        )
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= len(CLASS_NAMES))
    if bad.size:
        i = int(bad[0])
        raise CifarFormatError(f"{source}: label byte {labels[i]} >= 10 at byte offset {i * RECORD_BYTES}")
    return raw[:, 1:].reshape((-1,) + IMAGE_SHAPE).copy(), labels


def serialize_records(images: np.ndarray, labels: np.ndarray) -> bytes:
    """Inverse of :func:`parse_records`; accepts uint8 or [0,1] float images."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.rint(np.clip(images, 0, 1) * 255).astype(np.uint8)
    out = np.empty((len(labels), RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = images.reshape(len(labels), -1)
    return out.tobytes()


def load_cifar10(directory: str | Path, seed: int = 0) -> DatasetSplit:
    """Load all six binary batches and re-split their union 60/20/20."""
    directory = Path(directory)
    paths = [directory / name for name in BATCH_FILES]
    present = [p for p in paths if p.exists()]
    if not present:
        raise FileNotFoundError(f"no CIFAR-10 binary batches in {directory}")
    if len(present) != len(paths):
        missing = [p.name for p in paths if not p.exists()]
        raise FileNotFoundError(f"{directory}: missing batch files {missing}")
    images, labels = [], []
    for p in paths:
        x, y = parse_records(p.read_bytes(), source=str(p))
        images.append(x)
        labels.append(y)
    x = np.concatenate(images).astype(np.float32) / 255.0
    y = np.concatenate(labels)
    return make_split(x, y, CLASS_NAMES, seed)
