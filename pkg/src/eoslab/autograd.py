"""Reverse-mode automatic differentiation over numpy arrays.

Small tape-based engine sized for desk-scale transformers: float64 only,
no views into graph tensors, deterministic evaluation order. Gradients are
exact up to floating point; every op here is checked against central finite
differences in the test suite.
"""

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus the tape hooks needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False, _parents=(), _bwd=None):
        if isinstance(data, np.ndarray):
            self.data = data.astype(np.float64, copy=False)
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._bwd = _bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _track(*tensors):
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    if not _track(a, b):
        return Tensor(out)

    def bwd(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return Tensor(out, requires_grad=True, _parents=(a, b), _bwd=bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    if not _track(a, b):
        return Tensor(out)

    def bwd(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return Tensor(out, requires_grad=True, _parents=(a, b), _bwd=bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    if not _track(a, b):
        return Tensor(out)

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return Tensor(out, requires_grad=True, _parents=(a, b), _bwd=bwd)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data
    if not _track(a, b):
        return Tensor(out)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return Tensor(out, requires_grad=True, _parents=(a, b), _bwd=bwd)


def rows(table, idx):
    """Embedding lookup: gather rows of `table` by integer index array."""
    table = as_tensor(table)
    idx = np.asarray(idx)
    out = table.data[idx]
    if not _track(table):
        return Tensor(out)

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return Tensor(out, requires_grad=True, _parents=(table,), _bwd=bwd)


def reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)
    if not _track(x):
        return Tensor(out)

    def bwd(g):
        return (g.reshape(x.data.shape),)

    return Tensor(out, requires_grad=True, _parents=(x,), _bwd=bwd)


def transpose(x, axes):
    x = as_tensor(x)
    out = x.data.transpose(axes)
    inv = np.argsort(axes)
    if not _track(x):
        return Tensor(out)

    def bwd(g):
        return (g.transpose(inv),)

    return Tensor(out, requires_grad=True, _parents=(x,), _bwd=bwd)


def narrow(x, axis, start, length):
    """Contiguous slice [start, start+length) along `axis`."""
    x = as_tensor(x)
    sel = [slice(None)] * x.data.ndim
    sel[axis] = slice(start, start + length)
    sel = tuple(sel)
    out = x.data[sel].copy()
    if not _track(x):
        return Tensor(out)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[sel] = g
        return (gx,)

    return Tensor(out, requires_grad=True, _parents=(x,), _bwd=bwd)


def concat(xs, axis):
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    if not _track(*xs):
        return Tensor(out)
    sizes = [x.data.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if x.requires_grad else None for p, x in zip(parts, xs))

    return Tensor(out, requires_grad=True, _parents=tuple(xs), _bwd=bwd)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x):
    """tanh-approximation GELU; smooth, so finite-difference checks behave."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)
    if not _track(x):
        return Tensor(out)

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * du
        return (g * dx,)

    return Tensor(out, requires_grad=True, _parents=(x,), _bwd=bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data
    if not _track(x, gain, bias):
        return Tensor(out)

    def bwd(g):
        gx = gg = gb = None
        gxhat = g * gain.data
        if x.requires_grad:
            m1 = gxhat.mean(axis=-1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (gxhat - m1 - xhat * m2)
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.data.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.data.shape)
        return gx, gg, gb

    return Tensor(out, requires_grad=True, _parents=(x, gain, bias), _bwd=bwd)


def masked_softmax(x, allowed):
    """Softmax over the last axis restricted to `allowed` entries.

    Disallowed entries get probability exactly 0 and receive exactly zero
    gradient. Every row must have at least one allowed entry.
    """
    x = as_tensor(x)
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), x.data.shape)
    z = np.where(allowed, x.data, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    p = e / e.sum(axis=-1, keepdims=True)
    if not _track(x):
        return Tensor(p)

    def bwd(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return ((g - inner) * p,)

    return Tensor(p, requires_grad=True, _parents=(x,), _bwd=bwd)


def nll_terms(logits, labels, allowed):
    """Per-position negative log-likelihood under a restricted softmax.

    Pure numpy helper shared by the loss op and by per-position reporting,
    so both produce bit-identical values. `logits` is [..., V] float,
    `labels` integer [...], `allowed` boolean [..., V]; the label entry must
    be allowed wherever the term is used.
    """
    z = np.where(allowed, logits, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True)) + zmax
    picked = np.take_along_axis(logits, labels[..., None], axis=-1)
    return (lse - picked)[..., 0]


def masked_cross_entropy(logits, labels, allowed, weights):
    """Weighted sum of restricted-softmax cross-entropy terms.

    The partition function runs over `allowed` entries only, so logits
    outside the mask get exactly zero gradient. `weights` carries the
    reduction (per-example position mean, batch mean, padding zeros).
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), logits.data.shape)
    weights = np.asarray(weights, dtype=np.float64)
    terms = nll_terms(logits.data, labels, allowed)
    out = np.asarray((terms * weights).sum())
    if not _track(logits):
        return Tensor(out)

    def bwd(g):
        z = np.where(allowed, logits.data, -np.inf)
        zmax = z.max(axis=-1, keepdims=True)
        e = np.exp(z - zmax)
        probs = e / e.sum(axis=-1, keepdims=True)
        dz = probs
        np.subtract.at(dz, (*np.indices(labels.shape), labels), 1.0)
        dz *= (g * weights)[..., None]
        return (dz,)

    return Tensor(out, requires_grad=True, _parents=(logits,), _bwd=bwd)


def backward(root, seed=None):
    """Backpropagate from `root`, accumulating into .grad of graph leaves."""
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    root.grad = np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=np.float64)
    for node in reversed(topo):
        if node._bwd is None:
            continue
        grads = node._bwd(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
