"""Minimal reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray and, when gradients are enabled, remembers the
operation that produced it as a backward closure plus references to its
parents. Calling ``backward()`` on a scalar output topologically sorts the
recorded graph and walks it once in reverse, accumulating ``grad`` arrays.
The graph is rebuilt on every forward pass (define-by-run), so looped or
data-dependent control flow needs no special casing.

Reference precision is float64; float32 is supported as a fast mode and is
selected by the dtype of the leaf tensors.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np


class ShapeMismatch(ValueError):
    pass


class AllMaskedRow(ValueError):
    pass


class EmptyBatch(ValueError):
    pass


class OutOfRange(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Shaped float array with optional participation in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bw = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        t = Tensor(self.data, requires_grad=False, dtype=self.data.dtype)
        return t

    def backward(self, grad=None):
        """Reverse-mode sweep from this node.

        Visits every recorded operation exactly once, in reverse topological
        order, so gradient contributions from all uses of a node are fully
        accumulated before its own backward rule fires.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._bw is not None:
                node._bw(node.grad)

    def _accum(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # Operator sugar; the module-level functions are the full surface.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _lift(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, bw):
    """Build a graph node; collapses to a plain tensor when grads are off."""
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = requires
    if requires:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._bw = bw
    else:
        out._parents = ()
        out._bw = None
    return out


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def parameter(data, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, dtype=dtype)


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(-_unbroadcast(g, b.shape))

    return _node(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        a._accum(g * s)

    return _node(a.data * s, (a,), bw)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0

    def bw(g):
        a._accum(g * keep)

    return _node(np.where(keep, a.data, 0.0), (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        a._accum(np.transpose(g, inv))

    return _node(np.transpose(a.data, axes), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def bw(g):
        a._accum(g.reshape(old))

    return _node(a.data.reshape(shape), (a,), bw)


def concat(parts, axis=0) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accum(g[tuple(idx)])

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        acc = np.zeros_like(a.data)
        acc[idx] = g
        a._accum(acc)

    return _node(a.data[idx], (a,), bw)


def index_select(a: Tensor, axis: int, indices) -> Tensor:
    indices = np.asarray(indices, dtype=np.intp)

    def bw(g):
        acc = np.zeros_like(np.moveaxis(a.data, axis, 0))
        np.add.at(acc, indices, np.moveaxis(g, axis, 0))
        a._accum(np.moveaxis(acc, 0, axis))

    return _node(np.take(a.data, indices, axis=axis), (a,), bw)


def repeat(a: Tensor, axis: int, times: int) -> Tensor:
    """Repeat each slice along ``axis`` ``times`` in a row."""
    def bw(g):
        split = a.shape[: axis + 1] + (times,) + a.shape[axis + 1 :]
        a._accum(g.reshape(split).sum(axis=axis + 1))

    return _node(np.repeat(a.data, times, axis=axis), (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        a._accum(np.full(a.shape, g, dtype=a.dtype))

    return _node(np.asarray(a.data.sum(), dtype=a.dtype), (a,), bw)


def mean_axis(a: Tensor, axis: int, keepdims=False) -> Tensor:
    n = a.shape[axis]

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape) / n)

    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; backward is dA = dC.B^T, dB = A^T.dC."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner dimensions disagree: {a.shape} x {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bw)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over the last two axes; leading axes must match."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"bmm shapes disagree: {a.shape} x {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accum(np.swapaxes(a.data, -1, -2) @ g)

    return _node(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# softmax / loss
# ---------------------------------------------------------------------------


def _masked_softmax(x, mask):
    """Softmax over the last axis; ``mask`` True marks allowed entries.

    Masked scores never enter the row max or the normalization, so the
    result over allowed entries is bit-for-bit independent of masked values.
    """
    if mask is None:
        m = x.max(axis=-1, keepdims=True)
        e = np.exp(x - m)
        return e / e.sum(axis=-1, keepdims=True)
    mask = np.broadcast_to(mask, x.shape)
    if not mask.any(axis=-1).all():
        raise AllMaskedRow("softmax row with every entry masked")
    neg = np.float64(-np.inf)
    m = np.where(mask, x, neg).max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, x, m) - m), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_last(a: Tensor, mask=None) -> Tensor:
    y = _masked_softmax(a.data, mask)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        a._accum((g - dot) * y)

    return _node(y.astype(a.dtype), (a,), bw)


def softmax_rows(a: Tensor, mask=None) -> Tensor:
    """Row-stabilized softmax on a 2-D array with an optional allow-mask."""
    if a.ndim != 2:
        raise ShapeMismatch(f"softmax_rows expects a 2-D array, got shape {a.shape}")
    if a.shape[1] < 1:
        raise ShapeMismatch("softmax_rows needs at least one column")
    return softmax_last(a, mask)


def cross_entropy(logits: Tensor, targets, ignore=(), reduction="mean") -> Tensor:
    """Negative log-likelihood of ``targets`` under row-wise softmax.

    ``targets`` is one token id per row of ``logits``; rows whose target is
    in ``ignore`` do not contribute. ``reduction`` is "mean" or "sum" over
    the contributing rows.
    """
    targets = np.asarray(targets, dtype=np.intp)
    n_rows, vocab = logits.shape
    if targets.shape != (n_rows,):
        raise ShapeMismatch(f"expected {n_rows} targets, got {targets.shape}")
    ignore = frozenset(ignore)
    keep = np.array([t not in ignore for t in targets], dtype=bool)
    n_kept = int(keep.sum())
    if n_kept == 0:
        raise EmptyBatch("every position is ignored")
    if ((targets[keep] < 0) | (targets[keep] >= vocab)).any():
        raise OutOfRange("target token outside the vocabulary")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n_rows), targets] - lse
    total = -logp[keep].sum()
    denom = n_kept if reduction == "mean" else 1

    def bw(g):
        soft = np.exp(z - lse[:, None])
        soft[np.arange(n_rows), targets] -= 1.0
        soft[~keep] = 0.0
        logits._accum(soft * (float(g) / denom))

    return _node(np.asarray(total / denom, dtype=logits.dtype), (logits,), bw)


def count_non_ignored(targets, ignore=()) -> int:
    ignore = frozenset(ignore)
    return sum(1 for t in targets if t not in ignore)


# ---------------------------------------------------------------------------
# convolution / dropout
# ---------------------------------------------------------------------------


def conv1d(x: Tensor, kernel: Tensor, dilation: int = 1, causal_left_pad: bool = True) -> Tensor:
    """1-D convolution of x[C_in, L] with kernel[C_out, C_in, K].

    With ``causal_left_pad`` the input is zero-padded by (K-1)*dilation on
    the left so y[o, t] only reads x[:, :t+1] and the length is preserved.
    """
    if x.ndim != 2 or kernel.ndim != 3:
        raise ShapeMismatch(f"conv1d expects x[C,L] and kernel[O,C,K], got {x.shape}, {kernel.shape}")
    c_in, length = x.shape
    c_out, k_in, ksize = kernel.shape
    if k_in != c_in:
        raise ShapeMismatch(f"channel mismatch: x has {c_in}, kernel expects {k_in}")
    if ksize < 1 or dilation < 1:
        raise ShapeMismatch("kernel size and dilation must be positive")
    pad = (ksize - 1) * dilation if causal_left_pad else 0
    out_len = length if causal_left_pad else length - (ksize - 1) * dilation
    if out_len < 1:
        raise ShapeMismatch("input shorter than the receptive field of one output")
    xp = np.pad(x.data, ((0, 0), (pad, 0))) if pad else x.data
    y = np.zeros((c_out, out_len), dtype=x.dtype)
    for j in range(ksize):
        y += kernel.data[:, :, j] @ xp[:, j * dilation : j * dilation + out_len]

    def bw(g):
        if kernel.requires_grad:
            dk = np.empty_like(kernel.data)
            for j in range(ksize):
                dk[:, :, j] = g @ xp[:, j * dilation : j * dilation + out_len].T
            kernel._accum(dk)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for j in range(ksize):
                dxp[:, j * dilation : j * dilation + out_len] += kernel.data[:, :, j].T @ g
            x._accum(dxp[:, pad:] if pad else dxp)

    return _node(y, (x, kernel), bw)


def dropout(x: Tensor, rate: float, rng=None, train: bool = True) -> Tensor:
    """Inverted dropout: identity when rate == 0 or in eval mode."""
    if not train or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate) / np.asarray(1.0 - rate, dtype=x.dtype)
    keep = keep.astype(x.dtype)

    def bw(g):
        x._accum(g * keep)

    return _node(x.data * keep, (x,), bw)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def grad_check(f, x: Tensor, eps: float = 1e-5, sample=None, rng=None) -> float:
    """Central finite differences against the tape gradient.

    Returns max over checked coordinates of
    |g_fd - g_tape| / max(1, |g_fd|, |g_tape|). ``sample`` limits the check
    to that many randomly chosen coordinates (all coordinates by default).
    """
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    out.backward()
    g_tape = x.grad.copy()
    if not np.isfinite(g_tape).all():
        raise NonFiniteGradient("tape gradient contains NaN or Inf")

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if sample is not None and sample < flat.size:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(flat.size, size=sample, replace=False)
    g_flat = g_tape.reshape(-1)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(x).data)
        flat[i] = orig - eps
        f_minus = float(f(x).data)
        flat[i] = orig
        g_fd = (f_plus - f_minus) / (2.0 * eps)
        if not math.isfinite(g_fd):
            raise NonFiniteGradient("finite-difference gradient is not finite")
        err = abs(g_fd - g_flat[i]) / max(1.0, abs(g_fd), abs(g_flat[i]))
        worst = max(worst, err)
    return worst
