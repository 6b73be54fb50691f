"""Dense tensor value type and the activation-memory ledger.

Every :class:`Tensor` registers its element count with the ledger that is
current when it is built and deregisters when it is garbage collected (or
explicitly released).  CPython reference counting makes this deterministic,
so ``live_elements`` is the number of elements held by reachable tensors.

Activation tensors and parameter tensors are counted separately: only the
former contribute to ``live_elements`` / ``peak_elements``.
"""

from __future__ import annotations

import contextvars
import threading
import weakref
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np

ACTIVATION = "activation"
PARAMETER = "parameter"

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Raised when operand shapes violate an operator's contract."""


@dataclass(frozen=True)
class MemoryLedger:
    """Point-in-time copy of the allocation counters."""

    live_elements: int
    peak_elements: int
    fwd_op_count: int
    bwd_op_count: int
    parameter_elements: int


class Ledger:
    """Mutable, thread-safe counter set behind :class:`MemoryLedger` snapshots."""

    def __init__(self):
        self._lock = threading.Lock()
        self.live_elements = 0
        self.peak_elements = 0
        self.fwd_op_count = 0
        self.bwd_op_count = 0
        self.parameter_elements = 0

    def register(self, n: int, kind: str) -> None:
        with self._lock:
            if kind == PARAMETER:
                self.parameter_elements += n
            else:
                self.live_elements += n
                if self.live_elements > self.peak_elements:
                    self.peak_elements = self.live_elements

    def release(self, n: int, kind: str) -> None:
        with self._lock:
            if kind == PARAMETER:
                self.parameter_elements -= n
            else:
                self.live_elements -= n

    def count_op(self, direction: str) -> None:
        with self._lock:
            if direction == "fwd":
                self.fwd_op_count += 1
            elif direction == "bwd":
                self.bwd_op_count += 1
            else:
                raise ValueError(f"unknown op direction {direction!r}")

    def reset_peak(self) -> None:
        """Restart peak tracking from the current live count."""
        with self._lock:
            self.peak_elements = self.live_elements

    def reset_ops(self) -> None:
        with self._lock:
            self.fwd_op_count = 0
            self.bwd_op_count = 0

    def snapshot(self) -> MemoryLedger:
        with self._lock:
            return MemoryLedger(
                live_elements=self.live_elements,
                peak_elements=self.peak_elements,
                fwd_op_count=self.fwd_op_count,
                bwd_op_count=self.bwd_op_count,
                parameter_elements=self.parameter_elements,
            )


_GLOBAL_LEDGER = Ledger()
_current_ledger: contextvars.ContextVar[Ledger] = contextvars.ContextVar(
    "revprop_ledger", default=_GLOBAL_LEDGER
)


def current_ledger() -> Ledger:
    return _current_ledger.get()


def ledger_snapshot() -> MemoryLedger:
    """Return a consistent copy of the current ledger's counters."""
    return current_ledger().snapshot()


@contextmanager
def ledger_scope() -> Iterator[Ledger]:
    """Route all allocations made inside the block to a fresh ledger.

    Tensors remember the ledger they were registered with, so a tensor
    created inside the scope is released against that scope's ledger even
    if it outlives the block.
    """
    ledger = Ledger()
    token = _current_ledger.set(ledger)
    try:
        yield ledger
    finally:
        _current_ledger.reset(token)


def _release(ledger: Ledger, n: int, kind: str) -> None:
    ledger.release(n, kind)


class Tensor:
    """Immutable dense float array, channel-first ``(C, X, Y, Z)`` for volumes.

    ``precision`` is 32 or 64.  The buffer is row-major and read-only.
    """

    __slots__ = ("_array", "_kind", "_finalizer", "__weakref__")

    def __init__(self, data, dtype=None, kind: str = ACTIVATION):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            raise ShapeError("tensors need at least one dimension")
        self._init(np.ascontiguousarray(arr), kind)

    def _init(self, arr: np.ndarray, kind: str) -> None:
        if arr.ndim == 0:
            raise ShapeError("tensors need at least one dimension")
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"all extents must be positive, got {arr.shape}")
        arr.flags.writeable = False
        self._array = arr
        self._kind = kind
        ledger = current_ledger()
        ledger.register(arr.size, kind)
        self._finalizer = weakref.finalize(self, _release, ledger, arr.size, kind)

    @classmethod
    def wrap(cls, arr: np.ndarray, kind: str = ACTIVATION) -> "Tensor":
        """Take ownership of ``arr`` without copying (caller must not mutate it)."""
        if arr.dtype not in _FLOAT_DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}")
        if arr.ndim == 0:
            raise ShapeError("tensors need at least one dimension")
        t = cls.__new__(cls)
        t._init(np.ascontiguousarray(arr), kind)
        return t

    @classmethod
    def zeros(cls, shape, dtype=np.float64, kind: str = ACTIVATION) -> "Tensor":
        return cls.wrap(np.zeros(shape, dtype=dtype), kind)

    @property
    def shape(self) -> tuple:
        return self._array.shape

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def dtype(self) -> np.dtype:
        return self._array.dtype

    @property
    def precision(self) -> int:
        return 8 * self._array.dtype.itemsize

    @property
    def kind(self) -> str:
        return self._kind

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the buffer."""
        return self._array.reshape(-1)

    def numpy(self) -> np.ndarray:
        """Read-only ndarray view with the tensor's shape."""
        return self._array

    def release(self) -> None:
        """Deregister from the ledger now instead of at garbage collection."""
        self._finalizer()

    @property
    def released(self) -> bool:
        return not self._finalizer.alive

    def astype(self, dtype) -> "Tensor":
        return Tensor.wrap(self._array.astype(dtype), self._kind)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, precision={self.precision})"

    def __add__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    __rmul__ = __mul__


Scalar = Union[int, float]


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """Apply ``add``/``sub`` (tensor-tensor or tensor-scalar) or ``mul`` (by scalar)."""
    if isinstance(b, Tensor):
        _check_same_shape(a, b)
        rhs = b.numpy()
        if op == "mul":
            raise ShapeError("mul is defined for a scalar right operand only")
    else:
        rhs = a.dtype.type(b)
    if op == "add":
        out = a.numpy() + rhs
    elif op == "sub":
        out = a.numpy() - rhs
    elif op == "mul":
        out = a.numpy() * rhs
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return Tensor.wrap(out.astype(a.dtype, copy=False), a.kind)


def split_channels(x: Tensor) -> tuple[Tensor, Tensor]:
    """Split along the channel axis into two equal halves (copies)."""
    c = x.shape[0]
    if c % 2:
        raise ShapeError(f"cannot split odd channel count {c} (shape {x.shape})")
    arr = x.numpy()
    h = c // 2
    return Tensor.wrap(arr[:h].copy(), x.kind), Tensor.wrap(arr[h:].copy(), x.kind)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis."""
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"spatial mismatch: {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"precision mismatch: {a.precision} vs {b.precision}")
    return Tensor.wrap(np.concatenate([a.numpy(), b.numpy()], axis=0), a.kind)
