"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an ndarray and, while gradients are enabled, records
the operation that produced it as a vector-Jacobian closure.  ``backward``
walks the recorded graph in reverse topological order and accumulates
gradients into every reachable tensor with ``requires_grad=True``.

The op set is exactly what the grounding model needs: elementwise arithmetic,
matmul, activations, concatenation/reshaping, reductions, "same"-padded 1D/2D
convolution over small grids, the sparse interpolation sampling step, masked
softmax and log-softmax.  Convolutions use a shift-and-matmul formulation
(kernel sizes here are at most 3), which keeps both directions as plain BLAS
calls.  Every closed-form gradient in this module is checked against central
finite differences in the test suite.
"""

from contextlib import contextmanager

import numpy as np

from marn import kernels

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        order = _toposort(self)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + np.ones_like(self.data)
        for node in order:
            if node._vjp is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g
            # free the closure; graphs are single-use
            node._vjp = None
            node._parents = ()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _node(data, parents, vjp):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), vjp)


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(out, (a, b), vjp)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad @ bd

    def vjp(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        raise ValueError("matmul supports 1-D/2-D operands only")

    return _node(out, (a, b), vjp)


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _node(out, (a,), lambda g: (g * (out > 0.0),))


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(parts), vjp)


def split_last(a, sizes):
    """Split along the last axis into len(sizes) tensors."""
    a = as_tensor(a)
    splits = np.cumsum(sizes)[:-1]
    chunks = np.split(a.data, splits, axis=-1)
    outs = []
    offset = 0
    for chunk in chunks:
        start = offset
        width = chunk.shape[-1]
        offset += width

        def vjp(g, start=start, width=width):
            full = np.zeros_like(a.data)
            full[..., start : start + width] = g
            return (full,)

        outs.append(_node(chunk, (a,), vjp))
    return outs


def slice_axis(a, axis, start, stop):
    """Contiguous slice a[..., start:stop, ...] along one axis."""
    a = as_tensor(a)
    sel = [slice(None)] * a.data.ndim
    sel[axis] = slice(start, stop)
    sel = tuple(sel)
    out = a.data[sel]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[sel] = g
        return (full,)

    return _node(out, (a,), vjp)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _node(out, (a,), vjp)


def mean_(a, axis=None):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / count)


def broadcast_cells(v, grid_shape):
    """Tile a vector (d,) across a (T, S) grid -> (T, S, d)."""
    v = as_tensor(v)
    out = np.broadcast_to(v.data, grid_shape + v.data.shape).copy()
    return _node(out, (v,), lambda g: (g.sum(axis=(0, 1)),))


def max_over_axis(a, axis):
    a = as_tensor(a)
    out = a.data.max(axis=axis)
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis)
        return (full,)

    return _node(out, (a,), vjp)


def log_softmax(a):
    """Row-wise stable log-softmax over the last axis of a 2-D tensor."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - log_norm

    def vjp(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _node(out, (a,), vjp)


def pick_per_row(a, indices):
    """Gather a[i, indices[i]] -> (n,). indices is a constant int array."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return (full,)

    return _node(out, (a,), vjp)


def masked_softmax(logits, valid):
    """Softmax over the valid cells of a grid; invalid cells exactly zero.

    Realized as ``logits - 1e9 * invalid`` followed by an ordinary stable
    softmax; the invalid exponentials underflow to zero and the zeros are also
    written back explicitly.
    """
    logits = as_tensor(logits)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("masked_softmax: every cell is masked")
    shifted = np.where(valid, logits.data, -1e9)
    shifted = shifted - shifted.max()
    e = np.exp(shifted)
    e[~valid] = 0.0
    out = e / e.sum()

    def vjp(g):
        inner = (g * out).sum()
        return ((out * (g - inner)),)

    return _node(out, (logits,), vjp)


def weighted_cell_sum(weights, features):
    """Attention pooling: sum_{t,s} weights[t,s] * features[t,s,:] -> (d,)."""
    weights, features = as_tensor(weights), as_tensor(features)
    out = np.einsum("ts,tsd->d", weights.data, features.data)

    def vjp(g):
        g_w = np.einsum("tsd,d->ts", features.data, g)
        g_f = weights.data[:, :, None] * g
        return g_w, g_f

    return _node(out, (weights, features), vjp)


def conv1d_same(x, w, b):
    """1-D convolution over rows with zero "same" padding, stride 1.

    x: (T, c_in); w: (k, c_in, c_out); b: (c_out,).  Odd k only.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    k, c_in, c_out = w.data.shape
    if k % 2 != 1:
        raise ValueError("conv1d_same expects an odd kernel size")
    t = x.data.shape[0]
    pad = k // 2
    xp = np.zeros((t + 2 * pad, c_in))
    xp[pad : pad + t] = x.data
    out = np.tile(b.data, (t, 1))
    for dk in range(k):
        out += xp[dk : dk + t] @ w.data[dk]

    def vjp(g):
        g_x_p = np.zeros_like(xp)
        g_w = np.empty_like(w.data)
        for dk in range(k):
            g_x_p[dk : dk + t] += g @ w.data[dk].T
            g_w[dk] = xp[dk : dk + t].T @ g
        return g_x_p[pad : pad + t], g_w, g.sum(axis=0)

    return _node(out, (x, w, b), vjp)


def conv2d_same(x, w, b):
    """2-D convolution over a (T, S) grid with zero "same" padding, stride 1.

    x: (T, S, c_in); w: (kh, kw, c_in, c_out); b: (c_out,).  Odd kh, kw only.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    kh, kw, c_in, c_out = w.data.shape
    if kh % 2 != 1 or kw % 2 != 1:
        raise ValueError("conv2d_same expects odd kernel sizes")
    t, s = x.data.shape[:2]
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((t + 2 * ph, s + 2 * pw, c_in))
    xp[ph : ph + t, pw : pw + s] = x.data
    out = np.tile(b.data, (t, s, 1))
    for dy in range(kh):
        for dx in range(kw):
            window = xp[dy : dy + t, dx : dx + s].reshape(t * s, c_in)
            out += (window @ w.data[dy, dx]).reshape(t, s, c_out)

    def vjp(g):
        g2 = g.reshape(t * s, c_out)
        g_x_p = np.zeros_like(xp)
        g_w = np.empty_like(w.data)
        for dy in range(kh):
            for dx in range(kw):
                window = xp[dy : dy + t, dx : dx + s].reshape(t * s, c_in)
                g_w[dy, dx] = window.T @ g2
                g_x_p[dy : dy + t, dx : dx + s] += (g2 @ w.data[dy, dx].T).reshape(t, s, c_in)
        return g_x_p[ph : ph + t, pw : pw + s], g_w, g2.sum(axis=0)

    return _node(out, (x, w, b), vjp)


def sample_cells(x, idx_lo, idx_hi, w_lo, w_hi, grid_shape):
    """Apply a sparse interpolation map to feature rows.

    x: (T, d); the flat index/weight arrays describe grid_shape + (n_points,)
    sample positions.  Returns grid_shape + (n_points, d).
    """
    x = as_tensor(x)
    t, d = x.data.shape
    out_flat = kernels.sample_rows(np.ascontiguousarray(x.data), idx_lo, idx_hi, w_lo, w_hi)
    out = out_flat.reshape(grid_shape + (d,))

    def vjp(g):
        g_flat = np.ascontiguousarray(g.reshape(-1, d))
        return (kernels.sample_rows_grad(g_flat, idx_lo, idx_hi, w_lo, w_hi, t),)

    return _node(out, (x,), vjp)
