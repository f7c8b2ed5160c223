"""Dense-array reverse-mode autodiff on numpy.

A deliberately small engine: tensors wrap numpy arrays, every differentiable
primitive pushes a backward closure onto the active :class:`Tape`, and
``Tape.backward`` replays the closures in reverse recording order (creation
order is a topological order, so a strict reverse walk is correct).

Precision is a process-global switch: 32-bit for training throughput, 64-bit
for verification. Tensors snapshot the active dtype at creation.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""


# --------------------------------------------------------------------------
# precision
# --------------------------------------------------------------------------

_DTYPES = {32: np.float32, 64: np.float64}
_precision_bits = 64 if os.environ.get("SE2_PRECISION", "32").strip() == "64" else 32


def set_precision(bits: int) -> None:
    global _precision_bits
    if bits not in _DTYPES:
        raise ValueError(f"set_precision: bits must be 32 or 64, got {bits}")
    _precision_bits = bits


def get_precision() -> int:
    return _precision_bits


def active_dtype():
    return _DTYPES[_precision_bits]


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the global float width."""
    prev = _precision_bits
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(prev)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

class Tape:
    """Recording of differentiable ops, replayed in reverse by ``backward``."""

    _active: "Tape | None" = None

    def __init__(self):
        self._nodes: list[tuple["Tensor", callable]] = []

    def __enter__(self) -> "Tape":
        self._prev = Tape._active
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = self._prev
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: "Tensor", backward_fn) -> None:
        self._nodes.append((out, backward_fn))

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d loss / d t into ``t.grad`` for every tensor on the tape."""
        if loss.data.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
        if not self._nodes:
            raise ValueError("backward: tape is empty")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)


@contextlib.contextmanager
def no_grad():
    """Disable recording (evaluation mode)."""
    prev = Tape._active
    Tape._active = None
    try:
        yield
    finally:
        Tape._active = prev


# --------------------------------------------------------------------------
# tensors
# --------------------------------------------------------------------------

class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=active_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=active_dtype()))


def _make(data, parents, backward_fn) -> Tensor:
    """Wrap an op result; record on the active tape when any parent needs grads."""
    out = Tensor(data)
    tape = Tape._active
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._record(out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        a._accum(_unbroadcast(g * b.data, a.data.shape))
        b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def backward(g):
        a._accum(_unbroadcast(g / b.data, a.data.shape))
        b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        a._accum(g @ b.data.T)
        b._accum(a.data.T @ g)

    return _make(data, (a, b), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.data.shape for t in ts]}: {exc}") from None
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            t._accum(piece)

    return _make(data, ts, backward)


def slice_last(x, start: int, stop: int) -> Tensor:
    """Slice [start:stop] along the last axis."""
    x = _as_tensor(x)
    if not 0 <= start <= stop <= x.data.shape[-1]:
        raise ShapeError(f"slice_last: [{start}:{stop}] out of range for shape {x.data.shape}")
    data = x.data[..., start:stop]

    def backward(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        x._accum(full)

    return _make(data, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.data.shape} as {shape}") from None

    def backward(g):
        x._accum(g.reshape(x.data.shape))

    return _make(data, (x,), backward)


def gather_rows(x, index) -> Tensor:
    """Select rows along axis 0: out[k] = x[index[k]]."""
    x = _as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {x.data.shape}")
    data = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accum(full)

    return _make(data, (x,), backward)


def scatter_add_rows(values, index, n_rows: int) -> Tensor:
    """Sum rows into bins along axis 0: out[r] = sum of values[k] with index[k] == r."""
    v = _as_tensor(values)
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != (v.data.shape[0],):
        raise ShapeError(f"scatter_add_rows: index shape {idx.shape} vs values {v.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ShapeError(f"scatter_add_rows: index out of range for {n_rows} rows")
    data = np.zeros((n_rows,) + v.data.shape[1:], dtype=v.data.dtype)
    np.add.at(data, idx, v.data)

    def backward(g):
        v._accum(g[idx])

    return _make(data, (v,), backward)


def segment_softmax(logits, segments, n_segments: int) -> Tensor:
    """Softmax over entries that share a segment id (per-segment max subtracted)."""
    z = _as_tensor(logits)
    seg = np.asarray(segments, dtype=np.int64)
    if z.data.ndim != 1 or seg.shape != z.data.shape:
        raise ShapeError(f"segment_softmax: logits {z.data.shape} vs segments {seg.shape}")
    if seg.size and (seg.min() < 0 or seg.max() >= n_segments):
        raise ShapeError(f"segment_softmax: segment id out of range for {n_segments} segments")
    seg_max = np.full(n_segments, -np.inf, dtype=z.data.dtype)
    np.maximum.at(seg_max, seg, z.data)
    e = np.exp(z.data - seg_max[seg])
    denom = np.zeros(n_segments, dtype=z.data.dtype)
    np.add.at(denom, seg, e)
    y = e / denom[seg]

    def backward(g):
        dot = np.zeros(n_segments, dtype=y.dtype)
        np.add.at(dot, seg, y * g)
        z._accum(y * (g - dot[seg]))

    return _make(y, (z,), backward)


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = _as_tensor(x)
    gate = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    data = x.data * gate

    def backward(g):
        x._accum(g * gate)

    return _make(data, (x,), backward)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.data.shape).copy())

    return _make(data, (x,), backward)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(data.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.data.shape) / count)

    return _make(data, (x,), backward)


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    data = np.sqrt(x.data)

    def backward(g):
        x._accum(g / (2.0 * data))

    return _make(data, (x,), backward)


def square(x) -> Tensor:
    x = _as_tensor(x)
    data = x.data * x.data

    def backward(g):
        x._accum(g * 2.0 * x.data)

    return _make(data, (x,), backward)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    data = np.exp(x.data)

    def backward(g):
        x._accum(g * data)

    return _make(data, (x,), backward)


def log(x) -> Tensor:
    x = _as_tensor(x)
    data = np.log(x.data)

    def backward(g):
        x._accum(g / x.data)

    return _make(data, (x,), backward)


# Count of feature-rotation applications; lets tests assert that purely
# invariant models never touch a rotational code path.
_rotation_ops = 0


def rotation_op_count() -> int:
    return _rotation_ops


def reset_rotation_op_count() -> None:
    global _rotation_ops
    _rotation_ops = 0


def rotate_pairs(x, cos, sin) -> Tensor:
    """Rotate each trailing 2-vector of ``x`` by a per-row angle.

    ``x`` has shape (N, ..., 2); ``cos``/``sin`` have shape (N,) and broadcast
    over the middle axes. Angles are data, not parameters: no gradient flows
    into them, and the backward pass applies the inverse rotation (the map is
    orthogonal).
    """
    global _rotation_ops
    x = _as_tensor(x)
    if x.data.ndim < 2 or x.data.shape[-1] != 2:
        raise ShapeError(f"rotate_pairs: expected trailing axis 2, got {x.data.shape}")
    c = np.asarray(cos, dtype=x.data.dtype)
    s = np.asarray(sin, dtype=x.data.dtype)
    if c.shape != (x.data.shape[0],) or s.shape != c.shape:
        raise ShapeError(f"rotate_pairs: angles {c.shape} vs rows {x.data.shape[0]}")
    bshape = (x.data.shape[0],) + (1,) * (x.data.ndim - 2)
    cb, sb = c.reshape(bshape), s.reshape(bshape)
    px, py = x.data[..., 0], x.data[..., 1]
    data = np.stack([cb * px - sb * py, sb * px + cb * py], axis=-1)
    _rotation_ops += 1

    def backward(g):
        gx, gy = g[..., 0], g[..., 1]
        x._accum(np.stack([cb * gx + sb * gy, -sb * gx + cb * gy], axis=-1))

    return _make(data, (x,), backward)


# --------------------------------------------------------------------------
# parameters and gradient checking
# --------------------------------------------------------------------------

def uniform_param(rng: np.random.Generator, shape, fan_in: int | None = None) -> Tensor:
    """Dense weight init: uniform in +-sqrt(1/fan_in)."""
    fan = fan_in if fan_in is not None else shape[0]
    bound = float(np.sqrt(1.0 / max(fan, 1)))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def gradients(params, zero_missing: bool = True):
    """Collect ``p.grad`` for each parameter; unreached parameters yield zeros."""
    out = []
    for p in params:
        if p.grad is None and zero_missing:
            out.append(np.zeros_like(p.data))
        else:
            out.append(p.grad)
    return out


def grad_check(f, xs, h: float = 1e-5) -> float:
    """Max relative error between backward gradients and central differences.

    ``f`` maps the tensors in ``xs`` to a scalar Tensor. Must run at 64-bit
    precision; the error per coordinate is |analytic - fd| / max(1, |fd|).
    """
    if isinstance(xs, Tensor):
        xs = [xs]
    if get_precision() != 64:
        raise ValueError("grad_check: requires 64-bit precision (use precision(64))")
    for x in xs:
        x.grad = None
        x.requires_grad = True
    with Tape() as tape:
        loss = f(*xs)
        tape.backward(loss)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]
    worst = 0.0
    with no_grad():
        for x, an in zip(xs, analytic):
            flat = x.data.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                hi = float(f(*xs).data)
                flat[k] = orig - h
                lo = float(f(*xs).data)
                flat[k] = orig
                fd = (hi - lo) / (2.0 * h)
                err = abs(an.reshape(-1)[k] - fd) / max(1.0, abs(fd))
                worst = max(worst, err)
    return worst
