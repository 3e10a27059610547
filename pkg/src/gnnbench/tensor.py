"""Dense tensors with reverse-mode autodiff and per-op instrumentation.

Every operation here does three things: compute its numpy result, emit an
:class:`~gnnbench.profiler.OpRecord` to the active recorder (if any), and
append a backward closure to the active :class:`Tape` (if any).  Backward
replay emits its own records with a ``-grad`` suffix on both the kernel
name and the category.

FLOP conventions (a fused multiply-add counts as 2):

    matmul [m,k]x[k,n]      2*m*k*n        backward 4*m*k*n
    unsorted_segment_sum    E*F            backward 0 (gather)
    concat / gather_rows    0              gather backward E*F (scatter-add)
    add / mul / relu / clip 1 per element
    tanh / sigmoid / log    TRANSCENDENTAL_FLOPS per element (default 4)
    add_bias / scale_rows   1 per element
    sum                     1 per element

Byte model: base traffic of an op is all inputs read once plus the output
written once (index vectors count at 8 bytes per entry); the recorder
scales the base to per-level traffic.

Accumulations (segment sums, gradient sums) run in a fixed serial order so
identical inputs give bitwise-identical outputs and gradients.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from time import perf_counter
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, IndexBoundsError, UsageError
from .profiler import current_recorder

_DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

# FLOPs charged per element for transcendental functions (tanh, sigmoid,
# log).  A convention, not a measurement; change it before building a trace
# if you count differently.
TRANSCENDENTAL_FLOPS = 4

_uid = itertools.count(1)

_tapes = threading.local()   # a tape binds to the thread that opened it


class Tensor:
    """A dense row-major array with a dtype of f32 or f64.

    Tensors are immutable from the engine's point of view; optimizer updates
    go through :meth:`assign_` outside any tape.  ``node_id`` identifies the
    tensor on a tape and in gradient maps.
    """

    __slots__ = ("data", "node_id", "is_param")

    def __init__(self, data, dtype: str = "f32", param: bool = False):
        if dtype not in _DTYPES:
            raise DimensionError(f"unsupported dtype {dtype!r}; expected f32 or f64")
        arr = np.asarray(data, dtype=_DTYPES[dtype])
        if not arr.flags["C_CONTIGUOUS"]:
            # note: ascontiguousarray would also promote 0-d scalars to 1-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.node_id = next(_uid)
        self.is_param = param

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = array
        t.node_id = next(_uid)
        t.is_param = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def all_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def assign_(self, array: np.ndarray) -> None:
        """In-place overwrite, keeping node_id stable. Not recorded on tapes."""
        if array.shape != self.data.shape:
            raise DimensionError(
                f"assign_ shape mismatch: have {self.data.shape}, got {array.shape}")
        self.data[...] = array

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, node_id={self.node_id})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(self, other)


def tensor(data, dtype: str = "f32", param: bool = False) -> Tensor:
    return Tensor(data, dtype=dtype, param=param)


def zeros(shape, dtype: str = "f32") -> Tensor:
    return Tensor(np.zeros(shape), dtype=dtype)


def ones(shape, dtype: str = "f32") -> Tensor:
    return Tensor(np.ones(shape), dtype=dtype)


@dataclass(slots=True)
class TapeEntry:
    name: str                       # scoped kernel name from the forward pass
    category: str
    out_id: int
    inputs: tuple                   # input Tensors, in op order
    backward: Callable              # upstream ndarray -> tuple of grads (or None)
    grad_flops: int
    grad_bytes: float


class Tape:
    """Ordered record of op applications for one reverse-mode pass.

    The tape is topologically ordered by construction (an op's inputs are
    recorded before the op itself) and each entry is visited exactly once
    during backward replay.  A tape belongs to one logical training replica
    at a time.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.params: dict[int, Tensor] = {}
        self._out_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = getattr(_tapes, "stack", None)
        if stack is None:
            stack = []
            _tapes.stack = stack
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc=None, tb=None):
        _tapes.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.entries)

    def _append(self, entry: TapeEntry) -> None:
        self.entries.append(entry)
        self._out_ids.add(entry.out_id)
        for t in entry.inputs:
            if t.is_param:
                self.params[t.node_id] = t

    def knows(self, t: Tensor) -> bool:
        return t.node_id in self._out_ids


def _current_tape() -> Tape | None:
    stack = getattr(_tapes, "stack", None)
    return stack[-1] if stack else None


def _scoped(op: str) -> str:
    rec = current_recorder()
    return rec.scoped_name(op) if rec is not None else op


def _emit(name: str, category: str, flops: int, base_bytes: float, duration: float) -> None:
    rec = current_recorder()
    if rec is not None:
        rec.record(name, category, flops, base_bytes, duration)


def _finish(op: str, category: str, out_data: np.ndarray, inputs: tuple,
            flops: int, base_bytes: float, duration: float,
            backward: Callable | None, grad_flops: int = 0,
            grad_bytes: float = 0.0) -> Tensor:
    """Emit the record, register the tape entry, and wrap the result."""
    name = _scoped(op)
    _emit(name, category, flops, base_bytes, duration)
    out = Tensor._wrap(out_data)
    tape = _current_tape()
    if tape is not None and backward is not None:
        tape._append(TapeEntry(
            name=name, category=category, out_id=out.node_id, inputs=inputs,
            backward=backward, grad_flops=grad_flops, grad_bytes=grad_bytes,
        ))
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=like.dtype)


def _check_same_dtype(*ts: Tensor) -> None:
    dtypes = {t.dtype for t in ts}
    if len(dtypes) > 1:
        raise DimensionError(f"mixed dtypes {sorted(dtypes)}; operands must agree")


def _check_index_vector(name: str, idx, length_hint: int | None = None) -> np.ndarray:
    arr = np.asarray(idx)
    if arr.ndim != 1 or not np.issubdtype(arr.dtype, np.integer):
        raise DimensionError(f"{name} must be a 1-D integer vector, got shape {arr.shape}"
                             f" dtype {arr.dtype}")
    return arr.astype(np.int64, copy=False)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    a_data, b_data = a.data, b.data
    t0 = perf_counter()
    out = a_data @ b_data
    dt = perf_counter() - t0

    def backward(up):
        return up @ b_data.T, a_data.T @ up

    ds = a.data.itemsize
    return _finish(
        "matmul", "matmul", out, (a, b),
        flops=2 * m * k * n,
        base_bytes=ds * (m * k + k * n + m * n),
        duration=dt,
        backward=backward,
        grad_flops=4 * m * k * n,
        grad_bytes=ds * (m * n + 2 * m * k + 2 * k * n),
    )


def unsorted_segment_sum(data: Tensor, segment_ids, num_segments: int) -> Tensor:
    """out[s] = sum of data rows whose segment id is s; empty segments are zero."""
    ids = _check_index_vector("segment_ids", segment_ids)
    if data.data.ndim != 2 or ids.shape[0] != data.shape[0]:
        raise DimensionError(
            f"segment sum expects data [E,F] with E ids: data {data.shape}, ids {ids.shape}")
    if ids.size:
        bad = np.where((ids < 0) | (ids >= num_segments))[0]
        if bad.size:
            row = int(bad[0])
            raise IndexBoundsError(
                f"segment id {int(ids[row])} at row {row} outside [0, {num_segments})")
    e, f = data.shape
    src = data.data
    t0 = perf_counter()
    out = np.zeros((num_segments, f), dtype=src.dtype)
    np.add.at(out, ids, src)                     # serial in row order
    dt = perf_counter() - t0

    def backward(up):
        return (up[ids],)

    ds = src.itemsize
    return _finish(
        "segment-sum", "segment-sum", out, (data,),
        flops=e * f,
        base_bytes=ds * (e * f + num_segments * f) + 8 * e,
        duration=dt,
        backward=backward,
        grad_flops=0,
        grad_bytes=ds * (num_segments * f + e * f) + 8 * e,
    )


def gather_rows(data: Tensor, indices) -> Tensor:
    """out[i] = data[indices[i]]; backward scatter-adds by the same indices."""
    idx = _check_index_vector("indices", indices)
    if data.data.ndim != 2:
        raise DimensionError(f"gather_rows expects data [N,F], got {data.shape}")
    n, f = data.shape
    if idx.size:
        bad = np.where((idx < 0) | (idx >= n))[0]
        if bad.size:
            row = int(bad[0])
            raise IndexBoundsError(f"index {int(idx[row])} at row {row} outside [0, {n})")
    src = data.data
    t0 = perf_counter()
    out = src[idx]
    dt = perf_counter() - t0
    e = idx.shape[0]

    def backward(up):
        grad = np.zeros((n, f), dtype=up.dtype)
        np.add.at(grad, idx, up)
        return (grad,)

    ds = src.itemsize
    return _finish(
        "gather-rows", "concat-slice", out, (data,),
        flops=0,
        base_bytes=ds * (n * f + e * f) + 8 * e,
        duration=dt,
        backward=backward,
        grad_flops=e * f,
        grad_bytes=ds * (e * f + n * f) + 8 * e,
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise UsageError("concat needs at least one tensor")
    _check_same_dtype(*tensors)
    first = tensors[0].shape
    for t in tensors[1:]:
        a, b = list(first), list(t.shape)
        if len(a) != len(b):
            raise DimensionError(f"concat rank mismatch: {first} vs {t.shape}")
        a[axis] = b[axis] = 0
        if a != b:
            raise DimensionError(f"concat shape mismatch off axis {axis}: {first} vs {t.shape}")
    arrays = [t.data for t in tensors]
    t0 = perf_counter()
    out = np.concatenate(arrays, axis=axis)
    dt = perf_counter() - t0
    sizes = [t.shape[axis] for t in tensors]
    split_points = np.cumsum(sizes)[:-1]

    def backward(up):
        return tuple(np.ascontiguousarray(p) for p in np.split(up, split_points, axis=axis))

    base = 2 * out.nbytes
    return _finish(
        "concat", "concat-slice", out, tuple(tensors),
        flops=0, base_bytes=base, duration=dt,
        backward=backward, grad_flops=0, grad_bytes=base,
    )


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise DimensionError(
        f"{op}: shapes {a.shape} and {b.shape} are neither equal nor scalar-broadcastable")


def _reduce_to(grad: np.ndarray, target: Tensor) -> np.ndarray:
    if grad.shape == target.shape:
        return grad
    return np.asarray(grad.sum(), dtype=grad.dtype).reshape(target.shape)


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    _binary_shapes(a, b, "add")
    t0 = perf_counter()
    out = a.data + b.data
    dt = perf_counter() - t0

    def backward(up):
        return _reduce_to(up, a), _reduce_to(up, b)

    n = out.size
    ds = out.itemsize
    reduce_flops = sum(n for t in (a, b) if t.size == 1 and n > 1)
    return _finish(
        "add", "elementwise", out, (a, b),
        flops=n, base_bytes=ds * (a.size + b.size + n), duration=dt,
        backward=backward,
        grad_flops=reduce_flops,
        grad_bytes=ds * (n + a.size + b.size),
    )


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    _binary_shapes(a, b, "mul")
    a_data, b_data = a.data, b.data
    t0 = perf_counter()
    out = a_data * b_data
    dt = perf_counter() - t0

    def backward(up):
        return _reduce_to(up * b_data, a), _reduce_to(up * a_data, b)

    n = out.size
    ds = out.itemsize
    return _finish(
        "mul", "elementwise", out, (a, b),
        flops=n, base_bytes=ds * (a.size + b.size + n), duration=dt,
        backward=backward,
        grad_flops=2 * n,
        grad_bytes=ds * (3 * n + a.size + b.size),
    )


def _unary(op: str, x: Tensor, fn, make_backward, flops_per_elem: int,
           grad_flops_per_elem: int) -> Tensor:
    t0 = perf_counter()
    out = fn(x.data)
    dt = perf_counter() - t0
    n = x.size
    ds = x.data.itemsize
    return _finish(
        op, "elementwise", out, (x,),
        flops=flops_per_elem * n, base_bytes=ds * 2 * n, duration=dt,
        backward=make_backward(x.data, out),
        grad_flops=grad_flops_per_elem * n,
        grad_bytes=ds * 3 * n,
    )


def relu(x: Tensor) -> Tensor:
    def make_backward(x_data, out):
        def backward(up):
            return (up * (x_data > 0),)
        return backward
    return _unary("relu", x, lambda d: np.maximum(d, 0), make_backward, 1, 1)


def tanh(x: Tensor) -> Tensor:
    def make_backward(x_data, out):
        def backward(up):
            return (up * (1.0 - out * out),)
        return backward
    return _unary("tanh", x, np.tanh, make_backward, TRANSCENDENTAL_FLOPS, 3)


def sigmoid(x: Tensor) -> Tensor:
    def fn(d):
        return 1.0 / (1.0 + np.exp(-d))

    def make_backward(x_data, out):
        def backward(up):
            return (up * out * (1.0 - out),)
        return backward
    return _unary("sigmoid", x, fn, make_backward, TRANSCENDENTAL_FLOPS, 3)


def log(x: Tensor) -> Tensor:
    def make_backward(x_data, out):
        def backward(up):
            return (up / x_data,)
        return backward
    return _unary("log", x, np.log, make_backward, TRANSCENDENTAL_FLOPS, 1)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through where the clamp is inactive."""
    def make_backward(x_data, out):
        inside = (x_data >= lo) & (x_data <= hi)

        def backward(up):
            return (up * inside,)
        return backward
    return _unary("clip", x, lambda d: np.clip(d, lo, hi), make_backward, 1, 1)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast add: x [N,F] + b [F]."""
    _check_same_dtype(x, b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias expects [N,F] and [F]: got {x.shape}, {b.shape}")
    t0 = perf_counter()
    out = x.data + b.data
    dt = perf_counter() - t0
    n, f = x.shape

    def backward(up):
        return up, up.sum(axis=0)

    ds = x.data.itemsize
    return _finish(
        "add-bias", "elementwise", out, (x, b),
        flops=n * f, base_bytes=ds * (2 * n * f + f), duration=dt,
        backward=backward,
        grad_flops=n * f,
        grad_bytes=ds * (2 * n * f + f),
    )


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Per-row scale: x [N,F] * s [N], used to mask invalid rows."""
    _check_same_dtype(x, s)
    if x.data.ndim != 2 or s.data.ndim != 1 or x.shape[0] != s.shape[0]:
        raise DimensionError(f"scale_rows expects [N,F] and [N]: got {x.shape}, {s.shape}")
    x_data, s_col = x.data, s.data[:, None]
    t0 = perf_counter()
    out = x_data * s_col
    dt = perf_counter() - t0
    n, f = x.shape

    def backward(up):
        return up * s_col, (up * x_data).sum(axis=1)

    ds = x.data.itemsize
    return _finish(
        "scale-rows", "elementwise", out, (x, s),
        flops=n * f, base_bytes=ds * (2 * n * f + n), duration=dt,
        backward=backward,
        grad_flops=3 * n * f,
        grad_bytes=ds * (3 * n * f + 2 * n),
    )


def reshape(x: Tensor, shape) -> Tensor:
    """Zero-FLOP reshape; element count must be preserved."""
    shape = tuple(int(s) for s in shape)
    t0 = perf_counter()
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    dt = perf_counter() - t0
    old_shape = x.shape

    def backward(up):
        return (up.reshape(old_shape),)

    base = 2 * x.nbytes
    return _finish(
        "reshape", "concat-slice", out, (x,),
        flops=0, base_bytes=base, duration=dt,
        backward=backward, grad_flops=0, grad_bytes=base,
    )


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    t0 = perf_counter()
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    dt = perf_counter() - t0
    shape = x.shape

    def backward(up):
        return (np.broadcast_to(up, shape).copy(),)

    n = x.size
    ds = x.data.itemsize
    return _finish(
        "sum", "other", out, (x,),
        flops=n, base_bytes=ds * (n + 1), duration=dt,
        backward=backward,
        grad_flops=0,
        grad_bytes=ds * (n + 1),
    )


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch by kind; kinds: add, mul, relu, tanh, sigmoid, log, clip."""
    table = {"add": add, "mul": mul, "relu": relu, "tanh": tanh,
             "sigmoid": sigmoid, "log": log, "clip": clip}
    if kind not in table:
        raise UsageError(f"unknown elementwise kind {kind!r}")
    return table[kind](*args)


# ---------------------------------------------------------------------------
# Reverse-mode replay
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Accumulate gradients of a scalar loss for every parameter on the tape.

    Returns a map from parameter node_id to its gradient tensor; parameters
    the loss does not reach get zero gradients.  Gradient accumulation runs
    in reverse record order, which is fixed for a given forward pass.
    """
    if loss.size != 1:
        raise UsageError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.knows(loss):
        raise UsageError("loss was not produced under this tape")
    grads: dict[int, np.ndarray] = {
        loss.node_id: np.ones_like(loss.data)
    }
    for entry in reversed(tape.entries):
        up = grads.get(entry.out_id)
        if up is None:
            continue
        t0 = perf_counter()
        contribs = entry.backward(up)
        dt = perf_counter() - t0
        _emit(entry.name + "-grad", entry.category + "-grad",
              entry.grad_flops, entry.grad_bytes, dt)
        for tin, g in zip(entry.inputs, contribs):
            if g is None:
                continue
            acc = grads.get(tin.node_id)
            grads[tin.node_id] = g if acc is None else acc + g
    out: dict[int, Tensor] = {}
    for pid, p in tape.params.items():
        g = grads.get(pid)
        if g is None:
            g = np.zeros_like(p.data)
        out[pid] = Tensor._wrap(np.asarray(g, dtype=p.data.dtype))
    return out
