"""Dense float tensors with reverse-mode automatic differentiation.

The graph is built eagerly: every op returns a new :class:`Tensor` holding a
numpy array plus a backward closure.  Calling ``backward()`` on a scalar loss
runs the closures in reverse topological order and accumulates ``grad`` on
every tensor created with ``requires_grad=True``.  The graph is freed as it is
consumed; a second ``backward()`` on the same root raises
:class:`~pillarfuse.errors.GraphConsumed`.

float32 is the working precision; tests flip the default to float64 via
:func:`set_default_dtype` for finite-difference checks.
"""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import DegenerateBatch, GraphConsumed, ShapeMismatch

_default_dtype = np.float32
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    global _default_dtype
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be float32 or float64")
    _default_dtype = dtype


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy-backed tensor node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._freed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph ---------------------------------------------------------
    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from this scalar; frees the graph as it goes."""
        if self._freed:
            raise GraphConsumed("this graph was already consumed by backward()")
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
                node._backward = None
                node._parents = ()
                node._freed = True
        self._freed = True

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return pow_const(self, p)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return amax(self, axis, keepdims)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else _default_dtype))


def _result(data: np.ndarray, parents: tuple) -> tuple[Tensor, bool]:
    """Wrap op output; second value says whether a backward closure is needed."""
    out = Tensor(data)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if needs:
        out.requires_grad = True
        out._parents = parents
    return out, needs


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Adjoint of numpy broadcasting: reduce g back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out, needs = _result(a.data + b.data, (a, b))
    if needs:
        def bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad, b.shape))
        out._backward = bw
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out, needs = _result(a.data - b.data, (a, b))
    if needs:
        def bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b._accum(-_unbroadcast(out.grad, b.shape))
        out._backward = bw
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out, needs = _result(a.data * b.data, (a, b))
    if needs:
        def bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad * a.data, b.shape))
        out._backward = bw
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out, needs = _result(a.data / b.data, (a, b))
    if needs:
        def bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))
        out._backward = bw
    return out


def pow_const(x: Tensor, p: float) -> Tensor:
    out, needs = _result(x.data ** p, (x,))
    if needs:
        def bw():
            x._accum(out.grad * p * x.data ** (p - 1))
        out._backward = bw
    return out


def exp(x: Tensor) -> Tensor:
    out, needs = _result(np.exp(x.data), (x,))
    if needs:
        def bw():
            x._accum(out.grad * out.data)
        out._backward = bw
    return out


def log(x: Tensor) -> Tensor:
    out, needs = _result(np.log(x.data), (x,))
    if needs:
        def bw():
            x._accum(out.grad / x.data)
        out._backward = bw
    return out


def sqrt(x: Tensor) -> Tensor:
    out, needs = _result(np.sqrt(x.data), (x,))
    if needs:
        def bw():
            x._accum(out.grad * 0.5 / out.data)
        out._backward = bw
    return out


def tabs(x: Tensor) -> Tensor:
    out, needs = _result(np.abs(x.data), (x,))
    if needs:
        sign = np.sign(x.data)

        def bw():
            x._accum(out.grad * sign)
        out._backward = bw
    return out


def relu(x: Tensor) -> Tensor:
    out, needs = _result(np.maximum(x.data, 0), (x,))
    if needs:
        mask = x.data > 0

        def bw():
            x._accum(out.grad * mask)
        out._backward = bw
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out, needs = _result(s.astype(d.dtype), (x,))
    if needs:
        def bw():
            x._accum(out.grad * out.data * (1.0 - out.data))
        out._backward = bw
    return out


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    d = x.data
    val = np.log1p(np.exp(-np.abs(d))) + np.maximum(d, 0)
    out, needs = _result(val.astype(d.dtype), (x,))
    if needs:
        def bw():
            s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                         np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
            x._accum(out.grad * s.astype(d.dtype))
        out._backward = bw
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out, needs = _result(s, (x,))
    if needs:
        def bw():
            g = out.grad
            x._accum(out.data * (g - (g * out.data).sum(axis=axis, keepdims=True)))
        out._backward = bw
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out, needs = _result(ls, (x,))
    if needs:
        def bw():
            g = out.grad
            x._accum(g - np.exp(out.data) * g.sum(axis=axis, keepdims=True))
        out._backward = bw
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where unclipped."""
    out, needs = _result(np.clip(x.data, lo, hi), (x,))
    if needs:
        mask = (x.data > lo) & (x.data < hi)

        def bw():
            x._accum(out.grad * mask)
        out._backward = bw
    return out


def masked_fill(x: Tensor, keep: np.ndarray, fill: float) -> Tensor:
    """Replace entries where ``keep`` is False by ``fill`` (non-differentiable mask)."""
    out, needs = _result(np.where(keep, x.data, x.dtype.type(fill)), (x,))
    if needs:
        def bw():
            x._accum(out.grad * keep)
        out._backward = bw
    return out


def where_mask(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select between two tensors on a boolean array condition."""
    a, b = _as_tensor(a), _as_tensor(b)
    out, needs = _result(np.where(cond, a.data, b.data), (a, b))
    if needs:
        def bw():
            if a.requires_grad:
                a._accum(_unbroadcast(np.where(cond, out.grad, 0), a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(np.where(cond, 0, out.grad), b.shape))
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out, needs = _result(x.data.sum(axis=axis, keepdims=keepdims), (x,))
    if needs:
        def bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x._accum(np.broadcast_to(g, x.shape))
        out._backward = bw
    return out


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def amax(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Max along an axis; gradient routes to the first maximal entry."""
    if axis is None:
        flat = reshape(x, (x.size,))
        out = amax(flat, 0, False)
        return out
    out, needs = _result(x.data.max(axis=axis, keepdims=keepdims), (x,))
    if needs:
        idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)

        def bw():
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axis)
            gx = np.zeros(x.shape, dtype=x.dtype)
            np.put_along_axis(gx, idx, g, axis=axis)
            x._accum(gx)
        out._backward = bw
    return out


def stack_max(ts: list[Tensor]) -> Tensor:
    """Elementwise max over a list of same-shape tensors.

    The gradient routes to the argmax input; ties go to the lowest index.
    """
    if not ts:
        raise ValueError("stack_max needs at least one tensor")
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeMismatch(f"stack_max shapes differ: {t.shape} vs {ts[0].shape}")
    stacked = np.stack([t.data for t in ts])
    out, needs = _result(stacked.max(axis=0), (*ts,))
    if needs:
        winner = np.argmax(stacked, axis=0)

        def bw():
            for i, t in enumerate(ts):
                if t.requires_grad:
                    t._accum(np.where(winner == i, out.grad, 0)
                             .astype(t.dtype, copy=False))
        out._backward = bw
    return out


def segment_max(x: Tensor, starts: np.ndarray) -> Tensor:
    """Max over contiguous row segments: (M, C) -> (S, C).

    ``starts[j]`` is the first row of segment ``j``; segments must be
    non-empty, in order, and tile all M rows.  The gradient routes to the
    first maximal row of each segment.
    """
    if x.ndim != 2:
        raise ShapeMismatch(f"segment_max expects a 2-d tensor, got {x.shape}")
    starts = np.asarray(starts, dtype=np.intp)
    m = x.shape[0]
    if (starts.ndim != 1 or starts.size == 0 or starts[0] != 0
            or starts[-1] >= m or np.any(np.diff(starts) < 1)):
        raise ShapeMismatch("segment starts must begin at 0, strictly increase "
                            f"and stay below {m} rows")
    # bucket segments by length: each bucket reduces as one dense (n, k, C)
    # block, which beats reduceat's per-segment inner loops on short segments
    lengths = np.diff(starts, append=m)
    c = x.shape[1]
    vals = np.empty((starts.size, c), dtype=x.dtype)
    track = _grad_enabled and x.requires_grad
    first = np.empty((starts.size, c), dtype=np.intp) if track else None
    for k in np.unique(lengths):
        sel = lengths == k
        rows = starts[sel]
        block = x.data[rows[:, None] + np.arange(k)]
        vals[sel] = block.max(axis=1)
        if track:
            first[sel] = rows[:, None] + block.argmax(axis=1)
    out, needs = _result(vals, (x,))
    if needs:
        def bw():
            gx = np.zeros(x.shape, dtype=x.dtype)
            np.put_along_axis(gx, first, out.grad, axis=0)
            x._accum(gx)
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    out, needs = _result(x.data.reshape(shape), (x,))
    if needs:
        def bw():
            x._accum(out.grad.reshape(x.shape))
        out._backward = bw
    return out


def transpose(x: Tensor, axes) -> Tensor:
    out, needs = _result(x.data.transpose(axes), (x,))
    if needs:
        inv = np.argsort(axes)

        def bw():
            x._accum(out.grad.transpose(inv))
        out._backward = bw
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; the gradient pads zeros outside."""
    if not 0 <= axis < x.ndim:
        raise ShapeMismatch(f"axis {axis} out of range for {x.ndim}-d tensor")
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise ShapeMismatch(
            f"slice [{start}, {start + length}) exceeds size {x.shape[axis]}")
    sl = tuple(slice(start, start + length) if i == axis else slice(None)
               for i in range(x.ndim))
    out, needs = _result(x.data[sl].copy(), (x,))
    if needs:
        def bw():
            g = np.zeros(x.shape, dtype=x.dtype)
            g[sl] = out.grad
            x._accum(g)
        out._backward = bw
    return out


def concat(ts: list[Tensor], axis: int = 0) -> Tensor:
    out, needs = _result(np.concatenate([t.data for t in ts], axis=axis), (*ts,))
    if needs:
        sizes = [t.shape[axis] for t in ts]

        def bw():
            start = 0
            for t, sz in zip(ts, sizes):
                if t.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(start, start + sz)
                    t._accum(out.grad[tuple(sl)])
                start += sz
        out._backward = bw
    return out


def stack(ts: list[Tensor], axis: int = 0) -> Tensor:
    out, needs = _result(np.stack([t.data for t in ts], axis=axis), (*ts,))
    if needs:
        def bw():
            for i, t in enumerate(ts):
                if t.requires_grad:
                    t._accum(np.take(out.grad, i, axis=axis))
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out, needs = _result(np.matmul(a.data, b.data), (a, b))
    if needs:
        def bw():
            if a.requires_grad:
                ga = np.matmul(out.grad, np.swapaxes(b.data, -1, -2))
                a._accum(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), out.grad)
                b._accum(_unbroadcast(gb, b.shape))
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# 2D convolution machinery (im2col / col2im)
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    cols = np.empty((b, c, k, k, ho, wo), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + (ho - 1) * s + 1:s,
                                    kj:kj + (wo - 1) * s + 1:s]
    return cols.reshape(b, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, c: int, h: int, w: int, k: int, s: int, p: int,
            ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col` onto an (h, w) image padded by p."""
    b = cols.shape[0]
    img = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    c6 = cols.reshape(b, c, k, k, ho, wo)
    for ki in range(k):
        for kj in range(k):
            img[:, :, ki:ki + (ho - 1) * s + 1:s,
                kj:kj + (wo - 1) * s + 1:s] += c6[:, :, ki, kj]
    if p:
        img = img[:, :, p:p + h, p:p + w]
    return img


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2D convolution on (B, C, H, W) with square kernel (Co, C, k, k)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.shape}, weight {w.shape}")
    bsz, c, h, wd = x.shape
    co, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"conv2d output would be empty for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wm = w.data.reshape(co, -1)
    y = np.matmul(wm[None], cols).reshape(bsz, co, ho, wo)
    if b is not None:
        y += b.data.reshape(1, co, 1, 1)
    parents = (x, w) if b is None else (x, w, b)
    out, needs = _result(y, parents)
    if needs:
        def bw():
            g = out.grad.reshape(bsz, co, ho * wo)
            if b is not None and b.requires_grad:
                b._accum(out.grad.sum(axis=(0, 2, 3)))
            if w.requires_grad:
                gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
                w._accum(gw.reshape(w.shape))
            if x.requires_grad:
                gcols = np.matmul(wm.T[None], g)
                x._accum(_col2im(gcols, c, h, wd, k, stride, padding, ho, wo))
        out._backward = bw
    return out


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed 2D convolution: the exact adjoint of :func:`conv2d`.

    The weight layout matches conv2d with its output side first:
    w is (C_in, C_out, k, k) where C_in is the channel count of ``x``, so
    ``conv_transpose2d(y, w)`` with a conv weight (Co, Ci, k, k) maps
    Co-channel maps back to Ci channels.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"conv_transpose2d: input {x.shape}, weight {w.shape}")
    bsz, ci, h, wd = x.shape
    _, co, k, _ = w.shape
    ho = (h - 1) * stride + k - 2 * padding
    wo = (wd - 1) * stride + k - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"conv_transpose2d output would be empty for input {x.shape}")
    wm = w.data.reshape(ci, -1)
    xf = x.data.reshape(bsz, ci, h * wd)
    cols = np.matmul(wm.T[None], xf)
    y = _col2im(cols, co, ho, wo, k, stride, padding, h, wd)
    if b is not None:
        y += b.data.reshape(1, co, 1, 1)
    parents = (x, w) if b is None else (x, w, b)
    out, needs = _result(y, parents)
    if needs:
        def bw():
            g = out.grad
            gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
                if padding else g
            gcols = _im2col(gp, k, stride, h, wd)
            if b is not None and b.requires_grad:
                b._accum(g.sum(axis=(0, 2, 3)))
            if w.requires_grad:
                gw = np.matmul(xf, gcols.transpose(0, 2, 1)).sum(axis=0)
                w._accum(gw.reshape(w.shape))
            if x.requires_grad:
                gx = np.matmul(wm[None], gcols)
                x._accum(gx.reshape(x.shape))
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def _channel_shape(c: int, ndim: int, axis: int) -> tuple:
    shape = [1] * ndim
    shape[axis] = c
    return tuple(shape)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5,
               mask: np.ndarray | None = None) -> Tensor:
    """Normalize per channel over every other axis.

    In training mode batch statistics are used and the running buffers are
    updated in place (EMA keeping ``momentum`` of the old value).  In eval
    mode the running statistics are used.  ``mask`` (broadcastable to x,
    True = contributes) restricts the statistics to real entries so padding
    cannot shift them; every entry is still normalized and written out.

    Raises:
        DegenerateBatch: in training mode, if fewer than two values feed each
            channel's statistics or the whole batch is constant (variance
            below ``eps`` in every channel).
    """
    c = x.shape[axis]
    red = tuple(i for i in range(x.ndim) if i != axis)
    bshape = _channel_shape(c, x.ndim, axis)
    mb = None
    if training:
        if mask is None:
            m = float(np.prod([x.shape[i] for i in red])) if red else 1.0
            if m < 2:
                raise DegenerateBatch(f"batch of {int(m)} values per channel")
            mu = x.data.mean(axis=red)
            var = x.data.var(axis=red)
        else:
            # gather real entries so statistics are invariant to padding length;
            # the mask must be channel-uniform (size 1 along the channel axis)
            mb = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
            xm = np.moveaxis(x.data, axis, 0).reshape(c, -1)
            sel = np.moveaxis(mb, axis, 0).reshape(c, -1)[0]
            xr = xm[:, sel]
            if xr.shape[1] < 2:
                raise DegenerateBatch("fewer than two unmasked values per channel")
            m = float(xr.shape[1])
            mu = xr.mean(axis=1)
            var = xr.var(axis=1)
        if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(var)):
            raise DegenerateBatch("non-finite batch statistics")
        if float(var.max()) < eps:
            raise DegenerateBatch("constant batch: variance below epsilon in every channel")
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
        m = 1.0
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * ivar.reshape(bshape)
    y = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    out, needs = _result(y.astype(x.dtype), (x, gamma, beta))
    if needs:
        letters = "abcdefgh"[:x.ndim]
        dot_sub = f"{letters},{letters}->{letters[axis]}"

        def bw():
            g = out.grad
            sg = g.sum(axis=red)
            sgx = np.einsum(dot_sub, g, xhat)
            if gamma.requires_grad:
                gamma._accum(sgx)
            if beta.requires_grad:
                beta._accum(sg)
            if x.requires_grad:
                scale = (gamma.data * ivar).reshape(bshape)
                if training:
                    # gx = (g*gamma - (s1 + xhat*s2)*mask/m) * ivar with
                    # s1 = gamma*sg and s2 = gamma*sgx, built in place
                    pull = xhat * ((gamma.data * sgx * ivar / m).reshape(bshape))
                    pull += (gamma.data * sg * ivar / m).reshape(bshape)
                    if mb is not None:
                        pull *= mb
                    gx = g * scale
                    gx -= pull
                else:
                    gx = g * scale
                x._accum(gx.astype(x.dtype, copy=False))
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# scatter
# ---------------------------------------------------------------------------

def scatter_columns(x: Tensor, rows: np.ndarray, cols: np.ndarray,
                    h: int, w: int) -> Tensor:
    """Place (C, P) feature columns at (row, col) cells of a zero (C, h, w) grid.

    Cells must be unique and in range (the caller validates); the gradient is
    the gather of the output gradient at the same cells.
    """
    c, p = x.shape
    grid = np.zeros((c, h, w), dtype=x.dtype)
    if p:
        grid[:, rows, cols] = x.data
    out, needs = _result(grid, (x,))
    if needs:
        def bw():
            x._accum(out.grad[:, rows, cols])
        out._backward = bw
    return out
