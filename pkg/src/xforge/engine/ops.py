"""Forward/backward kernels for every engine op kind.

Spatial ops are rank-agnostic: inputs are ``(batch, channel, *spatial)``
and the same kernels serve 1, 2 or 3 spatial axes. The ``*2d`` kinds
require rank 4 and the ``*3d`` kinds rank 5.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Callable

import numpy as np

from .tensor import ShapeError

LOG_EPS = 1e-12

Shape = tuple[int, ...]


@dataclass(frozen=True)
class OpDef:
    shape: Callable[..., Shape]
    forward: Callable[..., tuple[np.ndarray, dict]]
    backward: Callable[..., tuple]
    arity: tuple[int, int] = (1, 1)

    def check(self, kind: str, shapes: list[Shape], params: dict) -> Shape:
        lo, hi = self.arity
        if not lo <= len(shapes) <= hi:
            raise ShapeError(f"{kind}: expected {lo}..{hi} inputs, got {len(shapes)}")
        try:
            return self.shape(*shapes, **params)
        except ShapeError as exc:
            raise ShapeError(f"{kind}: {exc}") from None


OPS: dict[str, OpDef] = {}


def register(kind: str, shape, forward, backward, arity=(1, 1)):
    OPS[kind] = OpDef(shape, forward, backward, arity)


def infer_shape(kind: str, *shapes: Shape, **params) -> Shape:
    """Pure shape algebra for ``kind``; raises ShapeError on invalid extents."""
    return OPS[kind].check(kind, list(shapes), params)


# ---------------------------------------------------------------- helpers


def _sum_to(g: np.ndarray, shape: Shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _spatial(ndim: int) -> tuple[int, ...]:
    return tuple(range(2, ndim))


# ---------------------------------------------------------------- elementwise


def _same(x: Shape, **_) -> Shape:
    return tuple(x)


def _unary(kind, fwd, bwd, **defaults):
    def forward(arrays, **p):
        (x,) = arrays
        out = fwd(x, **{**defaults, **p})
        return out, {"x": x, "out": out}

    def backward(g, saved, **p):
        return (bwd(g, saved["x"], saved["out"], **{**defaults, **p}),)

    register(kind, _same, forward, backward)


_unary("relu", lambda x: np.maximum(x, 0), lambda g, x, y: g * (x > 0))
_unary(
    "leaky_relu",
    lambda x, slope: np.where(x > 0, x, x * slope).astype(x.dtype),
    lambda g, x, y, slope: g * np.where(x > 0, 1.0, slope).astype(x.dtype),
    slope=0.01,
)
_unary("abs", np.abs, lambda g, x, y: g * np.sign(x))
_unary("log", lambda x: np.log(x + LOG_EPS), lambda g, x, y: g / (x + LOG_EPS))
_unary("exp", np.exp, lambda g, x, y: g * y)


def _sigmoid(x):
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(x.dtype)


_unary("sigmoid", _sigmoid, lambda g, x, y: g * y * (1 - y))
_unary(
    "softplus",
    lambda x: (np.logaddexp(0, x)).astype(x.dtype),
    lambda g, x, y: g * _sigmoid(x),
)
_unary(
    "pow",
    lambda x, exponent: np.power(x, exponent).astype(x.dtype),
    lambda g, x, y, exponent: g * (exponent * np.power(x, exponent - 1)).astype(x.dtype),
)
_unary("scalar_mul", lambda x, scalar: (x * scalar).astype(x.dtype), lambda g, x, y, scalar: g * np.asarray(scalar, g.dtype))


# ---------------------------------------------------------------- broadcasting binary


def _bshape(a: Shape, b: Shape, **_) -> Shape:
    try:
        return tuple(np.broadcast_shapes(a, b))
    except ValueError:
        raise ShapeError(f"cannot broadcast {a} with {b}") from None


def _binary(kind, fwd, bwd):
    def forward(arrays, **_):
        a, b = arrays
        return fwd(a, b), {"a": a, "b": b}

    def backward(g, saved, **_):
        a, b = saved["a"], saved["b"]
        ga, gb = bwd(g, a, b)
        return _sum_to(ga, a.shape), _sum_to(gb, b.shape)

    register(kind, _bshape, forward, backward, arity=(2, 2))


_binary("add", lambda a, b: a + b, lambda g, a, b: (g, g))
_binary("sub", lambda a, b: a - b, lambda g, a, b: (g, -g))
_binary("mul", lambda a, b: a * b, lambda g, a, b: (g * b, g * a))
_binary("div", lambda a, b: a / b, lambda g, a, b: (g / b, -g * a / (b * b)))


# ---------------------------------------------------------------- reductions and reshapes


def _reduce_shape(x: Shape, axis=None, keepdims=False) -> Shape:
    try:
        axes = _norm_axes(axis, len(x)) if len(x) else ()
    except (TypeError, ZeroDivisionError):
        raise ShapeError(f"bad axis {axis} for {x}") from None
    if axis is not None and any(not -len(x) <= a < len(x) for a in ((axis,) if isinstance(axis, int) else axis)):
        raise ShapeError(f"axis {axis} out of range for {x}")
    if keepdims:
        return tuple(1 if i in axes else n for i, n in enumerate(x))
    return tuple(n for i, n in enumerate(x) if i not in axes)


def _sum_fwd(arrays, axis=None, keepdims=False):
    (x,) = arrays
    return np.asarray(x.sum(axis=axis, keepdims=keepdims), dtype=x.dtype), {"shape": x.shape}


def _expand(g, shape, axis):
    axes = _norm_axes(axis, len(shape))
    g = np.asarray(g).reshape([1 if i in axes else n for i, n in enumerate(shape)])
    return np.broadcast_to(g, shape)


def _sum_bwd(g, saved, axis=None, keepdims=False):
    return (np.array(_expand(g, saved["shape"], axis)),)


def _mean_fwd(arrays, axis=None, keepdims=False):
    (x,) = arrays
    return np.asarray(x.mean(axis=axis, keepdims=keepdims), dtype=x.dtype), {"shape": x.shape}


def _mean_bwd(g, saved, axis=None, keepdims=False):
    shape = saved["shape"]
    count = int(np.prod([shape[a] for a in _norm_axes(axis, len(shape))]))
    return (np.array(_expand(g, shape, axis)) / np.asarray(count, dtype=g.dtype),)


def _extreme(fn):
    def fwd(arrays, axis=None, keepdims=False):
        (x,) = arrays
        y = np.asarray(fn(x, axis=axis, keepdims=True), dtype=x.dtype)
        hit = (x == y).astype(x.dtype)
        hit /= hit.sum(axis=axis, keepdims=True)  # ties share the gradient
        out = y if keepdims else np.asarray(fn(x, axis=axis), dtype=x.dtype)
        return out, {"shape": x.shape, "hit": hit}

    def bwd(g, saved, axis=None, keepdims=False):
        return (np.array(_expand(g, saved["shape"], axis)) * saved["hit"],)

    return fwd, bwd


register("sum", _reduce_shape, _sum_fwd, _sum_bwd)
register("mean", _reduce_shape, _mean_fwd, _mean_bwd)
register("max", _reduce_shape, *_extreme(np.max))
register("min", _reduce_shape, *_extreme(np.min))


def _reshape_shape(x: Shape, shape) -> Shape:
    try:
        return np.empty(x, dtype=np.uint8).reshape(shape).shape
    except ValueError:
        raise ShapeError(f"cannot reshape {x} to {shape}") from None


register(
    "reshape",
    _reshape_shape,
    lambda arrays, shape: (arrays[0].reshape(shape), {"shape": arrays[0].shape}),
    lambda g, saved, shape: (g.reshape(saved["shape"]),),
)


def _select_shape(x: Shape, axis=1, index=0) -> Shape:
    if not -len(x) <= axis < len(x) or not 0 <= index < x[axis]:
        raise ShapeError(f"index {index} on axis {axis} out of range for {x}")
    return tuple(n for i, n in enumerate(x) if i != axis % len(x))


def _select_bwd(g, saved, axis=1, index=0):
    out = np.zeros(saved["shape"], dtype=g.dtype)
    idx = [slice(None)] * len(saved["shape"])
    idx[axis] = index
    out[tuple(idx)] = g
    return (out,)


register(
    "select",
    _select_shape,
    lambda arrays, axis=1, index=0: (np.take(arrays[0], index, axis=axis), {"shape": arrays[0].shape}),
    _select_bwd,
)


def _concat_shape(*shapes: Shape) -> Shape:
    first = shapes[0]
    if len(first) < 2:
        raise ShapeError(f"needs rank >= 2, got {first}")
    for s in shapes[1:]:
        if len(s) != len(first) or s[0] != first[0] or s[2:] != first[2:]:
            raise ShapeError(f"extents {s} incompatible with {first} outside the channel axis")
    return (first[0], sum(s[1] for s in shapes), *first[2:])


def _concat_bwd(g, saved):
    return tuple(np.split(g, np.cumsum(saved["channels"])[:-1], axis=1))


register(
    "concat_channels",
    _concat_shape,
    lambda arrays: (np.concatenate(arrays, axis=1), {"channels": [a.shape[1] for a in arrays]}),
    _concat_bwd,
    arity=(1, 64),
)


# ---------------------------------------------------------------- softmax family


def _softmax(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _axis_shape(x: Shape, axis=-1) -> Shape:
    if not -len(x) <= axis < len(x):
        raise ShapeError(f"axis {axis} out of range for {x}")
    return tuple(x)


register(
    "softmax",
    _axis_shape,
    lambda arrays, axis=-1: ((y := _softmax(arrays[0], axis)), {"out": y}),
    lambda g, saved, axis=-1: (saved["out"] * (g - (g * saved["out"]).sum(axis=axis, keepdims=True)),),
)


def _log_softmax_fwd(arrays, axis=-1):
    x = arrays[0]
    z = x - x.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return out, {"out": out}


register(
    "log_softmax",
    _axis_shape,
    _log_softmax_fwd,
    lambda g, saved, axis=-1: (g - np.exp(saved["out"]) * g.sum(axis=axis, keepdims=True),),
)


# ---------------------------------------------------------------- dense


def _dense_shape(x: Shape, w: Shape, b: Shape | None = None) -> Shape:
    if len(x) != 2 or len(w) != 2 or x[1] != w[0]:
        raise ShapeError(f"input {x} does not match weight {w}")
    if b is not None and tuple(b) != (w[1],):
        raise ShapeError(f"bias {b} does not match weight {w}")
    return (x[0], w[1])


def _dense_fwd(arrays):
    x, w = arrays[0], arrays[1]
    out = x @ w
    if len(arrays) == 3:
        out = out + arrays[2]
    return out, {"x": x, "w": w, "bias": len(arrays) == 3}


def _dense_bwd(g, saved):
    grads = (g @ saved["w"].T, saved["x"].T @ g)
    return grads + ((g.sum(axis=0),) if saved["bias"] else ())


register("dense", _dense_shape, _dense_fwd, _dense_bwd, arity=(2, 3))


# ---------------------------------------------------------------- convolutions


def _out_extent(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def _im2col(xp: np.ndarray, k: Shape, stride: int) -> tuple[np.ndarray, Shape]:
    """Channels-last patch matrix (B*prod(out), prod(k)*I) and the output extents."""
    nd = len(k)
    b, i = xp.shape[:2]
    out_sp = tuple(_out_extent(n, kk, stride) for n, kk in zip(xp.shape[2:], k))
    xl = np.moveaxis(xp, 1, -1)
    cols = np.empty((b, *out_sp, *k, i), dtype=xp.dtype)
    lead = (slice(None),) * (1 + nd)
    for off in np.ndindex(*k):
        sl = tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(off, out_sp))
        cols[lead + off] = xl[(slice(None),) + sl]
    return cols.reshape(b * int(np.prod(out_sp)), -1), out_sp


def _corr(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Strided cross-correlation. xp (B,I,*S), w (O,I,*k) -> (B,O,*out)."""
    o = w.shape[0]
    cols, out_sp = _im2col(xp, w.shape[2:], stride)
    wm = np.moveaxis(w, 1, -1).reshape(o, -1)
    out = (cols @ wm.T).reshape((xp.shape[0], *out_sp, o))
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def _corr_wgrad(xp: np.ndarray, g: np.ndarray, k: Shape, stride: int) -> np.ndarray:
    """Gradient of ``_corr`` wrt its weight: (O,I,*k)."""
    o = g.shape[1]
    cols, _ = _im2col(xp, k, stride)
    gl = np.moveaxis(g, 1, -1).reshape(-1, o)
    dw = (gl.T @ cols).reshape((o, *k, xp.shape[1]))
    return np.ascontiguousarray(np.moveaxis(dw, -1, 1))


def _corr_adjoint(g: np.ndarray, w: np.ndarray, stride: int, xp_sp: Shape) -> np.ndarray:
    """Adjoint of ``_corr`` wrt its input. g (B,O,*out) -> (B,I,*xp_sp)."""
    nd = w.ndim - 2
    k = w.shape[2:]
    out_sp = g.shape[2:]
    if stride != 1:
        dil = np.zeros(g.shape[:2] + tuple((n - 1) * stride + 1 for n in out_sp), dtype=g.dtype)
        dil[(slice(None), slice(None)) + (slice(None, None, stride),) * nd] = g
        g = dil
    pads = [(0, 0), (0, 0)]
    for n, kk, target in zip(g.shape[2:], k, xp_sp):
        pads.append((kk - 1, target - n))
    gp = np.pad(g, pads)
    wf = np.flip(w, axis=tuple(range(2, 2 + nd))).swapaxes(0, 1)
    return _corr(gp, np.ascontiguousarray(wf), 1)


def _conv_shape_for(rank: int):
    def shape(x: Shape, w: Shape, b: Shape | None = None, pad: int | None = None) -> Shape:
        if len(x) != rank or len(w) != rank:
            raise ShapeError(f"expected rank-{rank} input and weight, got {x} and {w}")
        if x[1] != w[1]:
            raise ShapeError(f"input channels {x[1]} != weight in-channels {w[1]} (input {x}, weight {w})")
        if b is not None and tuple(b) != (w[0],):
            raise ShapeError(f"bias {b} does not match out-channels {w[0]}")
        p = [kk // 2 for kk in w[2:]] if pad is None else [pad] * (rank - 2)
        out = tuple(n + 2 * pp - kk + 1 for n, kk, pp in zip(x[2:], w[2:], p))
        if any(o < 1 for o in out):
            raise ShapeError(f"kernel {w[2:]} larger than padded input {x[2:]}")
        return (x[0], w[0], *out)

    return shape


def _conv_fwd(arrays, pad=None):
    x, w = arrays[0], arrays[1]
    nd = x.ndim - 2
    p = [kk // 2 for kk in w.shape[2:]] if pad is None else [pad] * nd
    xp = np.pad(x, [(0, 0), (0, 0)] + [(pp, pp) for pp in p])
    out = _corr(xp, w, 1)
    if len(arrays) == 3:
        out += arrays[2].reshape((1, -1) + (1,) * nd)
    return out, {"xp": xp, "w": w, "pad": p, "bias": len(arrays) == 3}


def _conv_bwd(g, saved, pad=None):
    xp, w, p = saved["xp"], saved["w"], saved["pad"]
    nd = w.ndim - 2
    dxp = _corr_adjoint(g, w, 1, xp.shape[2:])
    crop = (slice(None), slice(None)) + tuple(slice(pp, n - pp) for pp, n in zip(p, xp.shape[2:]))
    dw = _corr_wgrad(xp, g, w.shape[2:], 1)
    grads = (np.ascontiguousarray(dxp[crop]), dw)
    if saved["bias"]:
        grads += (g.sum(axis=(0,) + tuple(range(2, 2 + nd))),)
    return grads


for _kind, _rank in (("conv1d", 3), ("conv2d", 4), ("conv3d", 5)):
    register(_kind, _conv_shape_for(_rank), _conv_fwd, _conv_bwd, arity=(2, 3))


def _tconv_shape_for(rank: int):
    def shape(x: Shape, w: Shape, b: Shape | None = None, stride: int = 2, pad: int = 0) -> Shape:
        if len(x) != rank or len(w) != rank:
            raise ShapeError(f"expected rank-{rank} input and weight, got {x} and {w}")
        if x[1] != w[0]:
            raise ShapeError(f"input channels {x[1]} != weight in-channels {w[0]} (input {x}, weight {w})")
        if b is not None and tuple(b) != (w[1],):
            raise ShapeError(f"bias {b} does not match out-channels {w[1]}")
        if stride < 1:
            raise ShapeError(f"stride must be positive, got {stride}")
        out = tuple((n - 1) * stride + kk - 2 * pad for n, kk in zip(x[2:], w[2:]))
        if any(o < 1 for o in out):
            raise ShapeError(f"padding {pad} leaves no output for input {x} and kernel {w[2:]}")
        return (x[0], w[1], *out)

    return shape


def _tconv_fwd(arrays, stride=2, pad=0):
    x, w = arrays[0], arrays[1]
    nd = x.ndim - 2
    full_sp = tuple((n - 1) * stride + kk for n, kk in zip(x.shape[2:], w.shape[2:]))
    full = _corr_adjoint(x, w, stride, full_sp)
    crop = (slice(None), slice(None)) + tuple(slice(pad, n - pad) for n in full_sp)
    out = np.ascontiguousarray(full[crop])
    if len(arrays) == 3:
        out += arrays[2].reshape((1, -1) + (1,) * nd)
    return out, {"x": x, "w": w, "bias": len(arrays) == 3}


def _tconv_bwd(g, saved, stride=2, pad=0):
    x, w = saved["x"], saved["w"]
    nd = x.ndim - 2
    gfull = np.pad(g, [(0, 0), (0, 0)] + [(pad, pad)] * nd) if pad else g
    dx = _corr(gfull, w, stride)
    dx = dx[(slice(None), slice(None)) + tuple(slice(0, n) for n in x.shape[2:])]
    dw = _corr_wgrad(gfull, x, w.shape[2:], stride)
    # _corr_wgrad contracts as (O=x-channels, I=g-channels) which is w's layout
    grads = (np.ascontiguousarray(dx), dw)
    if saved["bias"]:
        grads += (g.sum(axis=(0,) + tuple(range(2, 2 + nd))),)
    return grads


for _kind, _rank in (("transposed_conv2d", 4), ("transposed_conv3d", 5)):
    register(_kind, _tconv_shape_for(_rank), _tconv_fwd, _tconv_bwd, arity=(2, 3))


# ---------------------------------------------------------------- pooling


def _blocked(x: np.ndarray, k: int) -> np.ndarray:
    """(B,C,*S) -> (B,C,*S/k, k**nd) with each pooling window on the last axis."""
    nd = x.ndim - 2
    shape = list(x.shape[:2])
    for n in x.shape[2:]:
        shape += [n // k, k]
    v = x.reshape(shape)
    order = [0, 1] + [2 + 2 * i for i in range(nd)] + [3 + 2 * i for i in range(nd)]
    v = v.transpose(order)
    return v.reshape(v.shape[: 2 + nd] + (k**nd,))


def _unblocked(v: np.ndarray, shape: Shape, k: int) -> np.ndarray:
    nd = len(shape) - 2
    v = v.reshape(v.shape[: 2 + nd] + (k,) * nd)
    order = [0, 1]
    for i in range(nd):
        order += [2 + i, 2 + nd + i]
    return v.transpose(order).reshape(shape)


def _pool_shape(x: Shape, window: int | None = None) -> Shape:
    if len(x) < 3:
        raise ShapeError(f"needs (batch, channel, *spatial), got {x}")
    if window is None:
        return tuple(x[:2])
    if any(n % window for n in x[2:]):
        raise ShapeError(f"spatial extents {x[2:]} not divisible by window {window}")
    return (*x[:2], *(n // window for n in x[2:]))


def _maxpool_fwd(arrays):
    (x,) = arrays
    v = _blocked(x, 2)
    arg = v.argmax(axis=-1)
    out = np.take_along_axis(v, arg[..., None], axis=-1)[..., 0]
    return out, {"arg": arg, "shape": x.shape}


def _maxpool_bwd(g, saved):
    arg = saved["arg"]
    v = np.zeros(arg.shape + (2 ** (len(saved["shape"]) - 2),), dtype=g.dtype)
    np.put_along_axis(v, arg[..., None], g[..., None], axis=-1)
    return (_unblocked(v, saved["shape"], 2),)


register("maxpool2x2", lambda x: _pool_shape(x, 2), _maxpool_fwd, _maxpool_bwd)


def _avgpool_fwd(arrays, window=None):
    (x,) = arrays
    if window is None:
        return x.mean(axis=_spatial(x.ndim)), {"shape": x.shape}
    return _blocked(x, window).mean(axis=-1), {"shape": x.shape}


def _avgpool_bwd(g, saved, window=None):
    shape = saved["shape"]
    nd = len(shape) - 2
    if window is None:
        count = int(np.prod(shape[2:]))
        return (np.broadcast_to(g.reshape(g.shape + (1,) * nd), shape) / np.asarray(count, g.dtype),)
    v = np.broadcast_to(g[..., None], g.shape + (window**nd,)) / np.asarray(window**nd, g.dtype)
    return (_unblocked(np.ascontiguousarray(v), shape, window),)


register("avgpool", _pool_shape, _avgpool_fwd, _avgpool_bwd)


# ---------------------------------------------------------------- resampling


@lru_cache(maxsize=64)
def linear_resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel linear interpolation weights, edges clamped. Rows sum to 1."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        m[i, lo] += 1 - t
        m[i, hi] += t
    m.setflags(write=False)
    return m


def resize_separable(x: np.ndarray, matrices: list[np.ndarray], axes: tuple[int, ...]) -> np.ndarray:
    out = x
    for m, ax in zip(matrices, axes):
        out = np.moveaxis(np.tensordot(m.astype(x.dtype), out, axes=([1], [ax])), 0, ax)
    return np.ascontiguousarray(out)


def _up_shape(x: Shape) -> Shape:
    if len(x) < 3:
        raise ShapeError(f"needs (batch, channel, *spatial), got {x}")
    return (*x[:2], *(2 * n for n in x[2:]))


def _up_fwd(arrays):
    (x,) = arrays
    axes = _spatial(x.ndim)
    mats = [linear_resize_matrix(x.shape[a], 2 * x.shape[a]) for a in axes]
    return resize_separable(x, mats, axes), {"shape": x.shape}


def _up_bwd(g, saved):
    shape = saved["shape"]
    axes = _spatial(len(shape))
    mats = [linear_resize_matrix(shape[a], 2 * shape[a]).T for a in axes]
    return (resize_separable(g, mats, axes),)


register("bilinear_upsample2x", _up_shape, _up_fwd, _up_bwd)
OPS["trilinear_upsample2x"] = OPS["bilinear_upsample2x"]


SHAPE_OPS: dict[str, Any] = {k: v.shape for k, v in OPS.items()}
