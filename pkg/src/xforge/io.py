"""Persistence formats and heatmap rendering.

XMAP layout (little-endian): magic ``b"XMAP"``, version u16, method-tag
length u16 + UTF-8 tag, class u16, rank u8, one u32 extent per axis, then
the f32 payload in row-major order.
"""

from __future__ import annotations

import csv
import io
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .attributions import AttributionMap, PatchPartition
from .engine.checkpoint import FormatError

XMAP_MAGIC = b"XMAP"
XMAP_VERSION = 1


# ---------------------------------------------------------------- XMAP


def encode_map(amap: AttributionMap) -> bytes:
    tag = amap.method.encode("utf-8")
    scores = np.ascontiguousarray(amap.scores, dtype="<f4")
    if len(tag) > 0xFFFF or not 0 <= amap.target <= 0xFFFF:
        raise FormatError("method tag or class index out of range for XMAP")
    head = XMAP_MAGIC + struct.pack("<HH", XMAP_VERSION, len(tag)) + tag
    head += struct.pack("<HB", amap.target, scores.ndim) + struct.pack(f"<{scores.ndim}I", *scores.shape)
    return head + scores.tobytes()


def decode_map(buf: bytes, instance: str = "") -> AttributionMap:
    if buf[:4] != XMAP_MAGIC:
        raise FormatError(f"not an XMAP file (magic {buf[:4]!r})")
    try:
        version, tag_len = struct.unpack_from("<HH", buf, 4)
        if version != XMAP_VERSION:
            raise FormatError(f"unsupported XMAP version {version} (this build reads {XMAP_VERSION})")
        pos = 8
        tag = buf[pos : pos + tag_len].decode("utf-8")
        pos += tag_len
        target, rank = struct.unpack_from("<HB", buf, pos)
        pos += 3
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
    except struct.error as e:
        raise FormatError(f"truncated XMAP header: {e}") from None
    count = int(np.prod(shape))
    if len(buf) - pos != 4 * count:
        raise FormatError(f"XMAP payload holds {len(buf) - pos} bytes, expected {4 * count}")
    scores = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
    return AttributionMap(scores, tag, target, instance=instance)


def save_map(path: str | Path, amap: AttributionMap) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_map(amap))


def load_map(path: str | Path) -> AttributionMap:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"map file not found: {path}")
    return decode_map(path.read_bytes(), instance=path.stem)


# ---------------------------------------------------------------- CSV


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _cell(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


# ---------------------------------------------------------------- heatmaps

# blue -> cyan -> yellow -> red
_ANCHORS = np.array([0.0, 1 / 3, 2 / 3, 1.0])
_COLORS = np.array([[0, 0, 255], [0, 255, 255], [255, 255, 0], [255, 0, 0]], dtype=np.float64)


@dataclass(frozen=True)
class HeatmapRender:
    """Rendering options.

    ``q`` is the fraction of partition features kept by the top-q mask
    (``q = 1`` disables masking). ``pixel_mask`` ranks single pixels instead
    of partition features.
    """

    overlay: bool = False
    q: float = 1.0
    scale: int = 8
    pixel_mask: bool = False
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ValueError(f"q={self.q} outside (0, 1]")
        if self.scale < 1:
            raise ValueError("scale must be a positive integer")


def colormap(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to uint8 RGB along the blue-to-red scale."""
    v = np.clip(values, 0.0, 1.0)
    rgb = np.stack([np.interp(v, _ANCHORS, _COLORS[:, c]) for c in range(3)], axis=-1)
    return np.round(rgb).astype(np.uint8)


def top_features(aggregate: np.ndarray, q: float) -> np.ndarray:
    """Indices of the top ceil(q*d) features; ties go to the lower index."""
    k = math.ceil(q * len(aggregate) - 1e-9)
    order = np.argsort(-np.asarray(aggregate, dtype=np.float64), kind="stable")
    return np.sort(order[:k])


def top_mask(scores: np.ndarray, q: float, partition: PatchPartition | None = None, pixel: bool = False) -> np.ndarray:
    """Boolean (H, W) mask of the retained top-q features."""
    if pixel:
        keep = top_features(scores.ravel(), q)
        mask = np.zeros(scores.size, dtype=bool)
        mask[keep] = True
        return mask.reshape(scores.shape)
    partition = partition or PatchPartition.default(*scores.shape)
    return partition.mask(top_features(partition.aggregate(scores), q))


def render_heatmap(
    amap: AttributionMap | np.ndarray,
    render: HeatmapRender = HeatmapRender(),
    image: np.ndarray | None = None,
    partition: PatchPartition | None = None,
) -> bytes:
    """Render a map as PNG bytes of size (H*scale, W*scale).

    The map is min-max scaled and colormapped. With ``q < 1`` the output is
    the binary top-q mask instead (applied to ``image`` when given). An
    all-equal map renders as a uniform mid-scale color with a warning.
    """
    scores = np.asarray(amap.scores if isinstance(amap, AttributionMap) else amap, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("cannot render a map with non-finite values")
    lo, hi = scores.min(), scores.max()
    if hi > lo:
        norm = (scores - lo) / (hi - lo)
    else:
        warnings.warn("all-equal attribution map rendered as a uniform image", RuntimeWarning, stacklevel=2)
        norm = np.full(scores.shape, 0.5)
    base = _image_rgb(image, scores.shape) if image is not None else None
    if render.q < 1.0:
        mask = top_mask(scores, render.q, partition, render.pixel_mask)
        if base is None:
            rgb = np.where(mask[..., None], 255, 0).astype(np.uint8).repeat(3, axis=-1)
        else:
            rgb = np.where(mask[..., None], base, base * 0.2).astype(np.uint8)
    else:
        rgb = colormap(norm)
        if render.overlay and base is not None:
            rgb = (render.alpha * rgb + (1 - render.alpha) * base).astype(np.uint8)
    rgb = rgb.repeat(render.scale, axis=0).repeat(render.scale, axis=1)
    out = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(out, format="PNG")
    return out.getvalue()


def _image_rgb(image: np.ndarray, shape) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] in (1, 3):
        img = np.moveaxis(img, 0, -1)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[:2] != tuple(shape):
        raise ValueError(f"image {img.shape[:2]} does not match map {tuple(shape)}")
    img = np.repeat(img, 3 // img.shape[-1], axis=-1)
    lo, hi = img.min(), img.max()
    return (255 * (img - lo) / (hi - lo if hi > lo else 1.0)).astype(np.float64)
