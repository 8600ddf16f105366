"""Dense float64 tensors with tape-based reverse-mode differentiation.

Design notes:

* Values are numpy float64 arrays. Every op validates that its output is
  finite; NaN/Inf raises :class:`NumericError` at the op that produced it.
* Gradients are recorded on an explicit :class:`Tape`. Ops append a record
  only while a tape is active (``with record() as tape``) and at least one
  input requires grad. ``tape.backward(loss)`` replays the records once, in
  reverse execution order, and refuses to run twice.
* Reduction orders are the fixed ones numpy uses for a given shape, so
  repeated runs on identical inputs are bitwise identical.
* Broadcasting is supported for elementwise ops and matmul batch dims; the
  backward pass sums gradients down to each input's shape.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Tape misuse (backward twice, missing root, ...)."""


# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Ordered record of executed ops, replayable once in reverse."""

    def __init__(self):
        self._records = []  # (output tensor, backward closure)
        self._spent = False

    def __len__(self):
        return len(self._records)

    def _append(self, out: "Tensor", backward_fn) -> None:
        self._records.append((out, backward_fn))

    def backward(self, root: "Tensor") -> None:
        """Seed ``root`` with ones and propagate through all records."""
        if self._spent:
            raise TapeError("tape already replayed; re-run the forward pass")
        if not isinstance(root, Tensor) or root.data.size != 1:
            raise ShapeError("backward root must be a scalar tensor")
        if not root.requires_grad:
            raise TapeError("backward root does not require grad")
        if self._records and not any(out is root for out, _ in self._records):
            raise TapeError("backward root was not recorded on this tape")
        self._spent = True
        root.grad = np.ones_like(root.data)
        for out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)


_TAPES: list[Tape] = []


def _tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextmanager
def record():
    """Activate a fresh tape for the enclosed forward pass."""
    tape = Tape()
    _TAPES.append(tape)
    try:
        yield tape
    finally:
        _TAPES.pop()


# ---------------------------------------------------------------------------
# Tensor


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by '{op}'")
    return data


class Tensor:
    """A dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.data.shape))
    else:
        t.grad += g


def _emit(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Build the output tensor and record the backward closure if needed."""
    _check_finite(data, op)
    rg = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = rg
    tape = _tape()
    if rg and tape is not None:
        tape._append(out, backward_fn)
    return out


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic (numpy broadcasting semantics)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bw(g):
        _accumulate(a, _sum_to(g, a.shape))
        _accumulate(b, _sum_to(g, b.shape))

    return _emit(data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bw(g):
        _accumulate(a, _sum_to(g, a.shape))
        _accumulate(b, _sum_to(-g, b.shape))

    return _emit(data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bw(g):
        _accumulate(a, _sum_to(g * b.data, a.shape))
        _accumulate(b, _sum_to(g * a.data, b.shape))

    return _emit(data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def bw(g):
        _accumulate(a, _sum_to(g / b.data, a.shape))
        _accumulate(b, _sum_to(-g * data / b.data, b.shape))

    return _emit(data, "div", (a, b), bw)


# ---------------------------------------------------------------------------
# Elementwise nonlinearities


def relu(x) -> Tensor:
    x = as_tensor(x)
    keep = x.data > 0
    data = np.where(keep, x.data, 0.0)

    def bw(g):
        _accumulate(x, g * keep)

    return _emit(data, "relu", (x,), bw)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    keep = x.data > 0
    data = np.where(keep, x.data, slope * x.data)

    def bw(g):
        _accumulate(x, g * np.where(keep, 1.0, slope))

    return _emit(data, "leaky_relu", (x,), bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    data = 1.0 / (1.0 + np.exp(-x.data))

    def bw(g):
        _accumulate(x, g * data * (1.0 - data))

    return _emit(data, "sigmoid", (x,), bw)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    data = np.tanh(x.data)

    def bw(g):
        _accumulate(x, g * (1.0 - data * data))

    return _emit(data, "tanh", (x,), bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    data = np.exp(x.data)

    def bw(g):
        _accumulate(x, g * data)

    return _emit(data, "exp", (x,), bw)


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)

    def bw(g):
        _accumulate(x, g / x.data)

    return _emit(data, "log", (x,), bw)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(x.data)

    def bw(g):
        _accumulate(x, g * 0.5 / data)

    return _emit(data, "sqrt", (x,), bw)


def square(x) -> Tensor:
    return mul(x, x)


def stop_gradient(x) -> Tensor:
    """Constant view of ``x``: the backward pass treats it as data."""
    x = as_tensor(x)
    return Tensor(x.data, requires_grad=False)


# ---------------------------------------------------------------------------
# Reductions and shape ops


def tensor_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(gg, x.shape).copy())

    return _emit(np.asarray(data), "sum", (x,), bw)


def tensor_mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    data = x.data.reshape(shape)

    def bw(g):
        _accumulate(x, g.reshape(old))

    return _emit(data, "reshape", (x,), bw)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = x.data.transpose(axes)

    def bw(g):
        _accumulate(x, g.transpose(inv))

    return _emit(data, "transpose", (x,), bw)


def concat(tensors, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def bw(g):
        offset = 0
        for t, s in zip(ts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + s)
            _accumulate(t, g[tuple(sl)])
            offset += s

    return _emit(data, "concat", tuple(ts), bw)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, _sum_to(ga, a.shape))
        _accumulate(b, _sum_to(gb, b.shape))

    return _emit(data, "matmul", (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight (+ bias)`` over the last axis."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# Convolution


def _conv_out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = _conv_out_dim(h, kh, stride, pad), _conv_out_dim(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, xshape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = xshape
    ho, wo = _conv_out_dim(h, kh, stride, pad), _conv_out_dim(w, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return gx[:, :, pad : pad + h, pad : pad + w] if pad else gx


def conv2d_raw(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Plain numpy convolution forward (no autodiff, no bias)."""
    n = x.shape[0]
    o, _, kh, kw = w.shape
    ho = _conv_out_dim(x.shape[2], kh, stride, pad)
    wo = _conv_out_dim(x.shape[3], kw, stride, pad)
    cols = _im2col(x, kh, kw, stride, pad)
    out = np.matmul(w.reshape(o, -1), cols)
    return out.reshape(n, o, ho, wo)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW input against OIKK weights."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW x and OIKK weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {c} vs weight {ci}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"kernel {kh}x{kw} does not fit padded input {h}x{w} (pad {padding})")
    if stride < 1:
        raise ShapeError(f"invalid stride {stride}")
    ho, wo = _conv_out_dim(h, kh, stride, padding), _conv_out_dim(w, kw, stride, padding)

    cols = _im2col(x.data, kh, kw, stride, padding)  # [N, CKK, P]
    w2 = weight.data.reshape(o, -1)
    out = np.matmul(w2, cols).reshape(n, o, ho, wo)

    b = as_tensor(bias) if bias is not None else None
    if b is not None:
        if b.shape != (o,):
            raise ShapeError(f"conv2d bias must have shape ({o},), got {b.shape}")
        out = out + b.data[None, :, None, None]

    parents = (x, weight) if b is None else (x, weight, b)

    def bw(g):
        g2 = g.reshape(n, o, ho * wo)
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
            _accumulate(weight, gw)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            _accumulate(x, _col2im(gcols, x.shape, kh, kw, stride, padding))
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))

    return _emit(out, "conv2d", parents, bw)


# ---------------------------------------------------------------------------
# Softmax family


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        dot = np.sum(g * data, axis=axis, keepdims=True)
        _accumulate(x, data * (g - dot))

    return _emit(data, "softmax", (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    data = shifted - lse

    def bw(g):
        soft = np.exp(data)
        _accumulate(x, g - soft * np.sum(g, axis=axis, keepdims=True))

    return _emit(data, "log_softmax", (x,), bw)


def masked_softmax(logits, allowed: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over ``allowed`` positions only.

    Excluded positions get exactly zero weight and contribute no gradient.
    Rows with no allowed position come out as all zeros rather than an error
    (callers decide what an empty attention context means).
    """
    logits = as_tensor(logits)
    allow = np.broadcast_to(np.asarray(allowed, dtype=np.float64), logits.shape)
    with np.errstate(invalid="ignore"):
        masked_vals = np.where(allow > 0, logits.data, -np.inf)
        row_max = np.max(masked_vals, axis=axis, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)  # all-excluded rows

    shifted = mul(sub(logits, row_max), allow)  # excluded entries pinned to 0 pre-exp
    e = mul(exp(shifted), allow)
    denom = tensor_sum(e, axis=axis, keepdims=True)
    fix = (denom.data == 0.0).astype(np.float64)  # avoid 0/0 on empty rows
    return div(e, add(denom, fix))


# ---------------------------------------------------------------------------
# Lookup / scatter ops


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range [0, {table.shape[0]})")
    data = table.data[ids]

    def bw(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.shape[-1]))

    return _emit(data, "embedding", (table,), bw)


def gather_last(x, idx: np.ndarray) -> Tensor:
    """Pick ``x[..., idx]`` elementwise over the leading axes."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"gather index shape {idx.shape} != leading dims {x.shape[:-1]}")
    k = x.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise ShapeError(f"gather ids out of range [0, {k})")
    flat = x.data.reshape(-1, k)
    rows = np.arange(flat.shape[0])
    data = flat[rows, idx.reshape(-1)].reshape(idx.shape)

    def bw(g):
        gx = np.zeros_like(flat)
        gx[rows, idx.reshape(-1)] = g.reshape(-1)
        _accumulate(x, gx.reshape(x.shape))

    return _emit(data, "gather_last", (x,), bw)


# ---------------------------------------------------------------------------
# Spatial ops


def nearest_upsample(x, factor: int) -> Tensor:
    """Replicate each spatial cell of an NCHW tensor ``factor`` times."""
    x = as_tensor(x)
    if factor < 1:
        raise ShapeError(f"invalid upsample factor {factor}")
    if x.ndim != 4:
        raise ShapeError(f"nearest_upsample expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        _accumulate(x, g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return _emit(data, "nearest_upsample", (x,), bw)


def dropout(x, p: float, rng, training: bool = True) -> Tensor:
    """Inverted dropout driven by a :class:`dfvq.rng.Rng` stream."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    keep = (rng.uniform(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return mul(x, keep)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
