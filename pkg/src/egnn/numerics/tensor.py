"""Tensor type and the recording tape used for reverse-mode differentiation."""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_state = threading.local()


class NumericalError(ArithmeticError):
    """Raised when a guarded denominator underflows or a value goes non-finite."""


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class _Record:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class ComputationTape:
    """Ordered record of executed ops.

    Ops are appended as they run, so every record's inputs were produced by
    earlier records (or are leaves). A backward pass walks the records once in
    reverse and then marks the tape consumed.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __len__(self):
        return len(self.records)

    def record(self, op: str, inputs, output: "Tensor", backward) -> None:
        if self.consumed:
            raise RuntimeError("cannot record on a consumed tape")
        output._tape = self
        output._index = len(self.records)
        self.records.append(_Record(op, inputs, output, backward))

    def op_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for rec in self.records:
            counts[rec.op] = counts.get(rec.op, 0) + 1
        return counts


def current_tape() -> ComputationTape:
    tape = getattr(_state, "tape", None)
    if tape is None or tape.consumed:
        tape = ComputationTape()
        _state.tape = tape
    return tape


def reset_tape() -> ComputationTape:
    """Start a fresh tape; anything recorded on the previous one is dropped."""
    _state.tape = ComputationTape()
    return _state.tape


class Tensor:
    """Dense array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_index")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype.type if arr.dtype in (np.float32, np.float64) else _DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: ComputationTape | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    def __len__(self):
        return self.shape[0]

    # Operator sugar; the implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __abs__(self):
        from . import ops
        return ops.abs(self)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor],
                backward: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap an op output and record its backward rule if any input needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._tape = None
    out._index = -1
    needs = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        current_tape().record(op, tuple(inputs), out, backward)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls, so several losses can be
    back-propagated one after another before an optimizer step.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    tape = loss._tape
    if tape is None:
        seed = np.ones_like(loss.data)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    if tape.consumed:
        raise RuntimeError("backward already ran on this tape; run the forward pass again")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    records = tape.records
    for pos in range(loss._index, -1, -1):
        rec = records[pos]
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._tape is None:
                if gi.shape != t.data.shape:
                    raise AssertionError(f"{rec.op}: grad shape {gi.shape} != {t.data.shape}")
                t.grad = np.array(gi, dtype=t.data.dtype) if t.grad is None else t.grad + gi
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    tape.consumed = True
    tape.records = []
