"""Rotation/shift augmentation and ZCA whitening."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .records import ImageRecord

_ORDERS = {"nearest": 0, "bilinear": 1}


@dataclass(frozen=True)
class AugmentConfig:
    rotation: float = 15.0  # degrees, drawn uniformly in [-rotation, rotation]
    shift: float = 0.2  # fraction of the axis length
    zca: bool = False
    zca_epsilon: float = 1e-2
    interpolation: str = "bilinear"

    def __post_init__(self):
        if not 0.0 <= self.rotation <= 45.0:
            raise ValueError(f"rotation range {self.rotation} outside [0, 45] degrees")
        if not 0.0 <= self.shift < 1.0:
            raise ValueError(f"shift fraction {self.shift} outside [0, 1)")
        if self.interpolation not in _ORDERS:
            raise ValueError(f"interpolation must be one of {sorted(_ORDERS)}")

    @property
    def is_identity(self) -> bool:
        return self.rotation == 0 and self.shift == 0


def affine_warp(image: np.ndarray, angle: float, shift: tuple[float, float], order: int = 1) -> np.ndarray:
    """Rotate by ``angle`` degrees about the centre, then translate by ``shift`` (dy, dx) pixels.

    Pixels that come from outside the frame are zero.
    """
    h, w = image.shape[-2:]
    theta = np.deg2rad(angle)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    inv = rot.T
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - inv @ (centre + np.asarray(shift, dtype=float))
    out = np.stack(
        [ndimage.affine_transform(c, inv, offset=offset, order=order, mode="constant", cval=0.0) for c in image]
    )
    return out.astype(image.dtype)


def augment(record: ImageRecord, config: AugmentConfig, rng: np.random.Generator) -> ImageRecord:
    if config.is_identity:
        return ImageRecord(record.pixels.copy(), record.label)
    h, w = record.pixels.shape[-2:]
    angle = rng.uniform(-config.rotation, config.rotation)
    dy = rng.uniform(-config.shift, config.shift) * h
    dx = rng.uniform(-config.shift, config.shift) * w
    out = affine_warp(record.pixels, angle, (dy, dx), _ORDERS[config.interpolation])
    return ImageRecord(np.clip(out, 0.0, 1.0), record.label)


def augment_batch(x: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if config.is_identity:
        return x
    return np.stack([augment(ImageRecord(img, 0), config, rng).pixels for img in x])


@dataclass(frozen=True)
class ZCATransform:
    mean: np.ndarray  # (D,)
    matrix: np.ndarray  # (D, D), symmetric
    eigenvalues: np.ndarray

    def apply_flat(self, flat: np.ndarray) -> np.ndarray:
        return (flat - self.mean) @ self.matrix


def zca_fit(train, epsilon: float) -> ZCATransform:
    """Fit E diag(1/sqrt(lambda + eps)) E^T on mean-centred training pixels."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.stack([r.pixels for r in train]) if isinstance(train, (list, tuple)) else np.asarray(train)
    if len(x) < 2:
        raise ValueError("ZCA needs at least two training records")
    flat = x.reshape(len(x), -1).astype(np.float64)
    mean = flat.mean(axis=0)
    centred = flat - mean
    cov = centred.T @ centred / len(flat)
    if not np.all(np.isfinite(cov)):
        raise ValueError("non-finite pixel covariance")
    lam, vecs = np.linalg.eigh(cov)
    lam = np.clip(lam, 0.0, None)
    matrix = (vecs * (1.0 / np.sqrt(lam + epsilon))) @ vecs.T
    return ZCATransform(mean, matrix, lam)


def zca_apply(transform: ZCATransform, record: ImageRecord) -> ImageRecord:
    flat = record.pixels.reshape(-1).astype(np.float64)
    out = transform.apply_flat(flat).reshape(record.pixels.shape)
    return ImageRecord(out.astype(np.float32), record.label)
