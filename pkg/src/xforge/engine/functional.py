"""Thin named wrappers over :func:`apply_op`."""

from __future__ import annotations

from .tensor import Tensor, apply_op


def _with_bias(x, w, b):
    return [x, w] if b is None else [x, w, b]


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    return apply_op("dense", _with_bias(x, w, b))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, pad: int | None = None) -> Tensor:
    return apply_op("conv2d", _with_bias(x, w, b), pad=pad)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, pad: int | None = None) -> Tensor:
    return apply_op("conv3d", _with_bias(x, w, b), pad=pad)


def transposed_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2, pad: int = 0) -> Tensor:
    return apply_op("transposed_conv2d", _with_bias(x, w, b), stride=stride, pad=pad)


def transposed_conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2, pad: int = 0) -> Tensor:
    return apply_op("transposed_conv3d", _with_bias(x, w, b), stride=stride, pad=pad)


def relu(x: Tensor) -> Tensor:
    return apply_op("relu", [x])


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    return apply_op("leaky_relu", [x], slope=slope)


def sigmoid(x: Tensor) -> Tensor:
    return apply_op("sigmoid", [x])


def softplus(x: Tensor) -> Tensor:
    return apply_op("softplus", [x])


def exp(x: Tensor) -> Tensor:
    return apply_op("exp", [x])


def log(x: Tensor) -> Tensor:
    """Natural log guarded by an additive 1e-12."""
    return apply_op("log", [x])


def abs(x: Tensor) -> Tensor:  # noqa: A001
    return apply_op("abs", [x])


def sqrt(x: Tensor) -> Tensor:
    return apply_op("pow", [x], exponent=0.5)


def maxpool2x2(x: Tensor) -> Tensor:
    return apply_op("maxpool2x2", [x])


def avgpool(x: Tensor, window: int | None = None) -> Tensor:
    """Non-overlapping average pool; ``window=None`` pools globally to (B, C)."""
    return apply_op("avgpool", [x], window=window)


def upsample2x(x: Tensor) -> Tensor:
    return apply_op("bilinear_upsample2x", [x])


def concat_channels(*xs: Tensor) -> Tensor:
    return apply_op("concat_channels", list(xs))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply_op("softmax", [x], axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply_op("log_softmax", [x], axis=axis)


def select(x: Tensor, index: int, axis: int = 1) -> Tensor:
    return apply_op("select", [x], axis=axis, index=index)
