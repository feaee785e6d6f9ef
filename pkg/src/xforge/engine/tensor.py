"""Dense tensors, the recording tape and reverse-mode differentiation."""

from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

_ids = itertools.count(1)
_active_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("xforge_tape", default=None)


class ShapeError(ValueError):
    """An op received inputs whose extents are invalid for it."""


class Tensor:
    """A dense N-rank array with a unique value id.

    Data is stored as 32-bit floats unless a float64 array is passed
    explicitly, which is how finite-difference oracles run in shadow mode.
    """

    __slots__ = ("data", "id")
    __array_priority__ = 100

    def __init__(self, data: Any, dtype: Any = None):
        explicit64 = isinstance(data, np.ndarray) and data.dtype == np.float64
        arr = np.asarray(data)
        if dtype is None:
            dtype = np.float64 if explicit64 else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, id={self.id})"

    # operator sugar, all routed through apply_op so they are taped
    def __add__(self, other):
        return apply_op("add", [self, _lift(other, self)])

    def __radd__(self, other):
        return apply_op("add", [_lift(other, self), self])

    def __sub__(self, other):
        return apply_op("sub", [self, _lift(other, self)])

    def __rsub__(self, other):
        return apply_op("sub", [_lift(other, self), self])

    def __mul__(self, other):
        if np.isscalar(other):
            return apply_op("scalar_mul", [self], scalar=float(other))
        return apply_op("mul", [self, _lift(other, self)])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return apply_op("scalar_mul", [self], scalar=1.0 / float(other))
        return apply_op("div", [self, _lift(other, self)])

    def __rtruediv__(self, other):
        return apply_op("div", [_lift(other, self), self])

    def __neg__(self):
        return apply_op("scalar_mul", [self], scalar=-1.0)

    def __pow__(self, exponent: float):
        return apply_op("pow", [self], exponent=float(exponent))

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return apply_op("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return apply_op("mean", [self], axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims: bool = False) -> Tensor:
        return apply_op("max", [self], axis=axis, keepdims=keepdims)

    def min(self, axis=None, keepdims: bool = False) -> Tensor:
        return apply_op("min", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_op("reshape", [self], shape=tuple(shape))


def _lift(value: Any, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


@dataclass
class Entry:
    """One recorded op application."""

    index: int
    kind: str
    inputs: tuple[int, ...]
    input_shapes: tuple[tuple[int, ...], ...]
    output: int
    output_shape: tuple[int, ...]
    params: dict[str, Any]
    saved: dict[str, Any] = field(repr=False)
    dtype: Any = np.float32


class Tape:
    """Ordered record of op applications; single owner while recording.

    Use as a context manager: ops applied inside the ``with`` block are
    recorded in topological order.
    """

    def __init__(self):
        self.entries: list[Entry] = []
        self._token = None

    def __enter__(self) -> Tape:
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def kinds(self) -> list[str]:
        return [e.kind for e in self.entries]

    def record(self, kind, inputs, output, params, saved) -> Entry:
        entry = Entry(
            index=len(self.entries),
            kind=kind,
            inputs=tuple(t.id for t in inputs),
            input_shapes=tuple(t.shape for t in inputs),
            output=output.id,
            output_shape=output.shape,
            params=params,
            saved=saved,
            dtype=output.data.dtype,
        )
        self.entries.append(entry)
        return entry


def active_tape() -> Tape | None:
    return _active_tape.get()


class no_record:
    """Suspend recording on the active tape."""

    def __enter__(self):
        self._token = _active_tape.set(None)

    def __exit__(self, *exc):
        _active_tape.reset(self._token)


def apply_op(kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Evaluate ``kind`` on ``inputs`` and record it on the active tape."""
    from .ops import OPS

    try:
        op = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    arrays = [t.data for t in inputs]
    op.check(kind, [a.shape for a in arrays], params)
    out, saved = op.forward(arrays, **params)
    result = Tensor(out, dtype=np.result_type(*arrays) if arrays else np.float32)
    tape = _active_tape.get()
    if tape is not None:
        tape.record(kind, inputs, result, params, saved)
    return result


RuleFn = Callable[[Entry, np.ndarray], Sequence["np.ndarray | None"]]


def backward(
    tape: Tape,
    loss: Tensor | int,
    rules: Mapping[str, RuleFn] | None = None,
    seed: np.ndarray | None = None,
) -> dict[int, Tensor]:
    """Reverse sweep over ``tape`` from the scalar ``loss``.

    ``rules`` overrides the backward rule for selected op kinds; attribution
    methods use it for guided and rescale gradients. Returns a mapping from
    every recorded value id to its gradient, zeros where unreached.
    """
    from .ops import OPS

    loss_id = loss.id if isinstance(loss, Tensor) else int(loss)
    producer = next((e for e in reversed(tape.entries) if e.output == loss_id), None)
    if producer is None:
        raise ValueError(f"value {loss_id} was not produced on this tape")
    if int(np.prod(producer.output_shape)) != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {producer.output_shape}")

    rules = rules or {}
    dtype = producer.dtype
    grads: dict[int, np.ndarray] = {
        loss_id: np.ones(producer.output_shape, dtype=dtype) if seed is None else np.asarray(seed, dtype=dtype)
    }
    shapes: dict[int, tuple[int, ...]] = {}
    for entry in tape.entries:
        shapes[entry.output] = entry.output_shape
        for vid, shp in zip(entry.inputs, entry.input_shapes):
            shapes.setdefault(vid, shp)

    for entry in reversed(tape.entries):
        g = grads.get(entry.output)
        if g is None:
            continue
        rule = rules.get(entry.kind)
        in_grads = rule(entry, g) if rule is not None else OPS[entry.kind].backward(g, entry.saved, **entry.params)
        for vid, gi in zip(entry.inputs, in_grads):
            if gi is None:
                continue
            if vid in grads:
                grads[vid] = grads[vid] + gi
            else:
                grads[vid] = gi

    return Gradients(
        {vid: Tensor(g, dtype=dtype) for vid, g in grads.items()},
        shapes=shapes,
        dtype=dtype,
    )


class Gradients(dict):
    """Gradient lookup by value id; recorded but unreached values read as zeros."""

    def __init__(self, reached: dict[int, Tensor], shapes: dict[int, tuple[int, ...]], dtype):
        super().__init__(reached)
        self._shapes = shapes
        self._dtype = dtype

    def __missing__(self, vid: int) -> Tensor:
        if vid not in self._shapes:
            raise KeyError(vid)
        g = Tensor(np.zeros(self._shapes[vid], dtype=self._dtype))
        self[vid] = g
        return g

    def __contains__(self, vid) -> bool:
        return super().__contains__(vid) or vid in self._shapes

    def of(self, t: Tensor) -> np.ndarray:
        """Gradient array for tensor ``t``."""
        return self[t.id].data
