"""Dense tensors and the recording tape used for reverse-mode differentiation."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """A numpy array plus an optional gradient slot.

    ``requires_grad`` marks leaves whose adjoints should be kept; operations
    on such tensors are recorded on the active tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.take(self, index)


@dataclass
class Record:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered log of executed operations.

    Use as a context manager; ops executed inside it that touch a tensor
    needing gradients are appended in execution order. ``backward`` replays
    the adjoints in exact reverse order and may run once per reset.
    """

    def __init__(self):
        self.records: list[Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, name, inputs, output, backward) -> None:
        if self._consumed:
            raise TapeError("cannot record on a tape that was already replayed; call reset()")
        self.records.append(Record(name, tuple(inputs), output, backward))

    def reset(self) -> None:
        self.records.clear()
        self._consumed = False

    def backward(self, loss: Tensor, seed: np.ndarray | None = None, visit: Callable[[Record], None] | None = None) -> None:
        if self._consumed:
            raise TapeError("backward already ran on this tape; reset() before replaying")
        self._consumed = True
        if seed is None:
            if loss.size != 1:
                raise DimensionError("backward without a seed needs a scalar loss")
            seed = np.ones_like(loss.data)
        loss.accumulate(seed)
        for rec in reversed(self.records):
            if visit is not None:
                visit(rec)
            g = rec.output.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for t, gi in zip(rec.inputs, grads):
                if gi is not None and t.requires_grad:
                    t.accumulate(gi)
            # every consumer of an intermediate ran before its producer
            rec.output.grad = None


def needs_grad(*tensors) -> bool:
    return any(isinstance(t, Tensor) and t.requires_grad for t in tensors)


def emit(name: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out_data`` as a Tensor and record it when any input needs gradients.

    ``backward`` maps the output adjoint to one adjoint (or None) per input.
    Custom differentiable operations are built with this.
    """
    tape = active_tape()
    track = tape is not None and needs_grad(*inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.record(name, inputs, out, backward)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))
