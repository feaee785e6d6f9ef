"""Procedural coloured-shapes classification data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .records import DatasetSplit, make_split

SHAPE_KINDS = ("square", "disc", "triangle", "cross", "ring")


@dataclass(frozen=True)
class ShapesConfig:
    image_size: int = 32
    num_classes: int = 3
    per_class: int = 300
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_classes > len(SHAPE_KINDS):
            raise ValueError(f"num_classes {self.num_classes} exceeds the {len(SHAPE_KINDS)} shape kinds {SHAPE_KINDS}")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")


def shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "disc":
        return dy**2 + dx**2 <= r**2
    if kind == "triangle":
        # apex up, base at cy + r/2
        h = dy + r
        return (h >= 0) & (dy <= r * 0.6) & (np.abs(dx) <= h * 0.6)
    if kind == "cross":
        w = r * 0.35
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(f"unknown shape kind {kind!r}")


def render_shape(kind: str, size: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    r = rng.uniform(0.22, 0.36) * size
    cy = rng.uniform(r, size - r)
    cx = rng.uniform(r, size - r)
    background = rng.uniform(0.0, 0.45, size=3)
    colour = rng.uniform(0.35, 1.0, size=3)
    mask = shape_mask(kind, size, cy, cx, r)
    img = np.where(mask[None], colour[:, None, None], background[:, None, None])
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_shapes(config: ShapesConfig) -> DatasetSplit:
    """Deterministic-by-seed shapes dataset, split 60/20/20."""
    rng = np.random.default_rng(config.seed)
    kinds = SHAPE_KINDS[: config.num_classes]
    n = config.num_classes * config.per_class
    x = np.empty((n, 3, config.image_size, config.image_size), dtype=np.float32)
    y = np.repeat(np.arange(config.num_classes), config.per_class)
    for i, label in enumerate(y):
        x[i] = render_shape(kinds[label], config.image_size, rng, config.noise)
    return make_split(x, y, list(kinds), config.seed)
