"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a contiguous numpy buffer. Differentiable operations record
themselves on the active Tape (a Wengert list); replaying the records in
reverse order propagates gradients from a scalar loss back to every
parameter that was used to compute it.

Default precision is 32-bit; a 64-bit mode exists for gradient checking
(see `precision`). Ops never broadcast silently: shapes must match exactly
except where an op's name says otherwise (`add_rowvec`, `scale_by`,
softmax masks).
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32

LAYERNORM_EPS = 1e-5

# tanh-based gelu constants
_GELU_K0 = float(np.sqrt(2.0 / np.pi))
_GELU_K1 = 0.044715


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class MaskedSoftmaxWarning(UserWarning):
    """Emitted when a softmax row is fully masked (returns zeros, not NaN)."""


@contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (float64 for gradient checks)."""
    global DEFAULT_DTYPE
    prev = DEFAULT_DTYPE
    DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DEFAULT_DTYPE = prev


class Tensor:
    """A dense n-d array, optionally participating in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_produced")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._produced = False  # True once an op writes this tensor as output

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        """Detached copy of the underlying buffer."""
        return np.array(self.data, copy=True)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def constant(data):
    """Tensor that never receives gradients (targets, masks, lookup tables)."""
    return Tensor(data, requires_grad=False)


def param(data):
    """Trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of executed ops; reverse replay computes gradients.

    One training step = one tape. The record list is cleared by backward().
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor):
        """Propagate d(loss)/d(leaf) into .grad of every reachable leaf."""
        if loss.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads = {id(loss): (loss, np.ones_like(loss.data))}
        for out, fn in reversed(self._records):
            entry = grads.pop(id(out), None)
            if entry is None:
                continue
            g = entry[1]
            for tensor, contrib in fn(g):
                if not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = (tensor, grads[key][1] + contrib)
                else:
                    grads[key] = (tensor, contrib)
        # Whatever is left was never produced by a recorded op: leaves.
        for tensor, g in grads.values():
            if tensor._produced:
                continue
            tensor.grad = g if tensor.grad is None else tensor.grad + g
        self._records.clear()


def _record(out: Tensor, inputs, backward_fn):
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._produced = True
        tape._records.append((out, backward_fn))
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Linear algebra / shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return _record(out, (a, b), bwd)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got {x.shape}")
    out = Tensor(x.data.T)
    return _record(out, (x,), lambda g: [(x, g.T)])


def reshape(x: Tensor, shape) -> Tensor:
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}")
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: [(x, g.reshape(x.shape))])


def concat(xs, axis=0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat: empty input list")
    out = Tensor(np.concatenate([x.data for x in xs], axis=axis))
    sizes = [x.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            pieces.append((x, g[tuple(sl)]))
        return pieces

    return _record(out, tuple(xs), bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[start:stop])

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[start:stop] = g
        return [(x, dx)]

    return _record(out, (x,), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[:, start:stop])

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return [(x, dx)]

    return _record(out, (x,), bwd)


def gather_rows(x: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: indices must be 1-d, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.shape[0]} rows")
    out = Tensor(x.data[idx])

    def bwd(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return [(x, dx)]

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: [(a, g), (b, g)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: [(a, g), (b, -g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: [(a, g * b.data), (b, g * a.data)])


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)
    return _record(out, (x,), lambda g: [(x, g * c)])


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data + float(c))
    return _record(out, (x,), lambda g: [(x, g)])


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of x by a one-element tensor s (named broadcast)."""
    if s.size != 1:
        raise ShapeError(f"scale_by: scale must have one element, got {s.shape}")
    sval = s.data.reshape(())
    out = Tensor(x.data * sval)

    def bwd(g):
        return [(x, g * sval), (s, np.sum(g * x.data).reshape(s.shape))]

    return _record(out, (x, s), bwd)


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-C vector to every row of an (N, C) matrix."""
    if x.data.ndim != 2 or v.size != x.shape[1]:
        raise ShapeError(f"add_rowvec: {x.shape} rows cannot take vector {v.shape}")
    out = Tensor(x.data + v.data.reshape(1, -1))

    def bwd(g):
        return [(x, g), (v, g.sum(axis=0).reshape(v.shape))]

    return _record(out, (x, v), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.sum(x.data))
    return _record(out, (x,), lambda g: [(x, np.full(x.shape, g, dtype=x.dtype))])


# ---------------------------------------------------------------------------
# Nonlinearities and reductions
# ---------------------------------------------------------------------------

def softmax_lastdim(x: Tensor, mask=None) -> Tensor:
    """Row-stabilized softmax over the last dim; mask is additive (-inf blocks).

    Fully masked rows come back as all zeros with a MaskedSoftmaxWarning
    instead of NaN (legal padding can produce them).
    """
    z = x.data if mask is None else x.data + np.asarray(mask, dtype=x.dtype)
    rowmax = np.max(z, axis=-1, keepdims=True)
    dead = ~np.isfinite(rowmax)
    if dead.any():
        warnings.warn("softmax: fully masked row(s), returning zeros",
                      MaskedSoftmaxWarning, stacklevel=2)
        rowmax = np.where(dead, 0.0, rowmax)
    e = np.exp(z - rowmax)
    denom = e.sum(axis=-1, keepdims=True)
    out = Tensor(e / np.where(denom > 0, denom, 1.0))

    def bwd(g):
        y = out.data
        inner = np.sum(g * y, axis=-1, keepdims=True)
        return [(x, y * (g - inner))]

    return _record(out, (x,), bwd)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize each row to zero mean / unit variance, then affine."""
    if x.data.ndim != 2:
        raise ShapeError(f"layernorm: expected 2-d, got {x.shape}")
    c = x.shape[1]
    if gain.size != c or bias.size != c:
        raise ShapeError(f"layernorm: gain/bias must have {c} entries")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data.reshape(1, -1) + bias.data.reshape(1, -1))

    def bwd(g):
        gg = g * gain.data.reshape(1, -1)
        m1 = gg.mean(axis=1, keepdims=True)
        m2 = (gg * xhat).mean(axis=1, keepdims=True)
        dx = (gg - m1 - xhat * m2) * inv
        dgain = (g * xhat).sum(axis=0).reshape(gain.shape)
        dbias = g.sum(axis=0).reshape(bias.shape)
        return [(x, dx), (gain, dgain), (bias, dbias)]

    return _record(out, (x, gain, bias), bwd)


def gelu(x: Tensor) -> Tensor:
    u = _GELU_K0 * (x.data + _GELU_K1 * x.data ** 3)
    t = np.tanh(u)
    out = Tensor(0.5 * x.data * (1.0 + t))

    def bwd(g):
        du = _GELU_K0 * (1.0 + 3.0 * _GELU_K1 * x.data ** 2)
        dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * du
        return [(x, g * dx)]

    return _record(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out_val = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                       np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    out = Tensor(out_val)

    def bwd(g):
        y = out.data
        return [(x, g * y * (1.0 - y))]

    return _record(out, (x,), bwd)


def softplus(x: Tensor) -> Tensor:
    z = x.data
    out = Tensor(np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))))

    def bwd(g):
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                     np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return [(x, g * s)]

    return _record(out, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))
    return _record(out, (x,), lambda g: [(x, g * out.data)])


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    return _record(out, (x,), lambda g: [(x, g / x.data)])


def sqrt(x: Tensor) -> Tensor:
    out = Tensor(np.sqrt(x.data))
    return _record(out, (x,), lambda g: [(x, g / (2.0 * out.data))])


def reciprocal(x: Tensor) -> Tensor:
    out = Tensor(1.0 / x.data)
    return _record(out, (x,), lambda g: [(x, -g * out.data ** 2)])


def clip(x: Tensor, lo=None, hi=None) -> Tensor:
    out = Tensor(np.clip(x.data, lo, hi))

    def bwd(g):
        inside = np.ones_like(x.data)
        if lo is not None:
            inside = inside * (x.data >= lo)
        if hi is not None:
            inside = inside * (x.data <= hi)
        return [(x, g * inside)]

    return _record(out, (x,), bwd)


def absval(x: Tensor) -> Tensor:
    out = Tensor(np.abs(x.data))
    return _record(out, (x,), lambda g: [(x, g * np.sign(x.data))])


def huber(x: Tensor, delta: float) -> Tensor:
    """Elementwise Huber: quadratic inside |x| <= delta, linear beyond."""
    d = float(delta)
    a = np.abs(x.data)
    out = Tensor(np.where(a <= d, 0.5 * x.data ** 2, d * (a - 0.5 * d)))
    return _record(out, (x,), lambda g: [(x, g * np.clip(x.data, -d, d))])


def max_lastdim(x: Tensor) -> Tensor:
    """Row maxima, shape (N, 1); gradient routes to the first argmax."""
    if x.data.ndim != 2:
        raise ShapeError(f"max_lastdim: expected 2-d, got {x.shape}")
    idx = np.argmax(x.data, axis=1)
    out = Tensor(x.data[np.arange(x.shape[0]), idx].reshape(-1, 1))

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[np.arange(x.shape[0]), idx] = g[:, 0]
        return [(x, dx)]

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Image-grid ops (token maps flattened row-major as (H*W, C))
# ---------------------------------------------------------------------------

def image_forward_diff(x: Tensor, height: int, width: int, axis: int) -> Tensor:
    """Forward differences of an (H*W, C) map along x (axis=1) or y (axis=0).

    The last column (resp. row) has no forward neighbour and is excluded:
    output is (H*(W-1), C) for axis=1 and ((H-1)*W, C) for axis=0.
    """
    if x.shape[0] != height * width:
        raise ShapeError(f"image_forward_diff: {x.shape[0]} rows != {height}x{width}")
    grid = x.data.reshape(height, width, -1)
    if axis == 1:
        d = grid[:, 1:, :] - grid[:, :-1, :]
    elif axis == 0:
        d = grid[1:, :, :] - grid[:-1, :, :]
    else:
        raise ShapeError("image_forward_diff: axis must be 0 or 1")
    out = Tensor(d.reshape(-1, x.shape[1]))

    def bwd(g):
        gg = g.reshape(d.shape)
        dx = np.zeros_like(grid)
        if axis == 1:
            dx[:, 1:, :] += gg
            dx[:, :-1, :] -= gg
        else:
            dx[1:, :, :] += gg
            dx[:-1, :, :] -= gg
        return [(x, dx.reshape(x.shape))]

    return _record(out, (x,), bwd)


def pixel_shuffle_tokens(x: Tensor, grid_h: int, grid_w: int, r: int) -> Tensor:
    """Expand (grid_h*grid_w, r*r*C) tokens into a (grid_h*r * grid_w*r, C) map.

    Each token's channel block is laid out as (row_offset, col_offset, C).
    """
    n, ch = x.shape
    if n != grid_h * grid_w or ch % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle_tokens: {x.shape} does not fit "
                         f"{grid_h}x{grid_w} grid with factor {r}")
    c = ch // (r * r)
    y = x.data.reshape(grid_h, grid_w, r, r, c)
    y = y.transpose(0, 2, 1, 3, 4)  # (grid_h, r, grid_w, r, c)
    out = Tensor(y.reshape(grid_h * r * grid_w * r, c))

    def bwd(g):
        gg = g.reshape(grid_h, r, grid_w, r, c).transpose(0, 2, 1, 3, 4)
        return [(x, gg.reshape(x.shape))]

    return _record(out, (x,), bwd)
