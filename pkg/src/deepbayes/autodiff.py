"""Reverse-mode automatic differentiation over float64 numpy arrays.

Usage::

    with GradientTape() as tape:
        w = tape.watch(w0, "w")
        loss = ((x @ w) ** 2).sum()
    grads = tape.backward(loss)   # {"w": ndarray}

Operations only record onto the tape when at least one input is tracked by
the active tape; everything else is plain numpy evaluation.
"""
import math
import threading

import numpy as np

from . import kernels

VAR_FLOOR = 1e-8


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _tapes():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tapes()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array, optionally tracked on a gradient tape."""

    __slots__ = ("data", "node", "tape")
    __array_ufunc__ = None  # make ndarray-op-Tensor defer to Tensor

    def __init__(self, data, node=None, tape=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tracked = "" if self.node is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{tracked})"

    def __len__(self):
        return len(self.data)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class GradientTape:
    """Append-only record of differentiable operations."""

    def __init__(self):
        self.nodes = []  # (kind, parent node ids, vjp) ; vjp None for leaves
        self.handles = {}  # handle -> leaf node id
        self.leaf_shapes = {}
        self.consumed = False

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tapes()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def watch(self, value, handle=None):
        """Register ``value`` as a differentiable input and return its tracked tensor."""
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        data = value.data if isinstance(value, Tensor) else value
        node = len(self.nodes)
        self.nodes.append(("leaf", (), None))
        if handle is None:
            handle = node
        if handle in self.handles:
            raise TapeError(f"handle {handle!r} already watched")
        self.handles[handle] = node
        t = Tensor(np.array(data, dtype=np.float64), node, self)
        self.leaf_shapes[node] = t.shape
        return t

    def _record(self, kind, data, parents, vjp):
        node = len(self.nodes)
        self.nodes.append((kind, parents, vjp))
        return Tensor(data, node, self)

    def backward(self, loss):
        """Return ``{handle: gradient}`` for every watched input and consume the tape."""
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        if not isinstance(loss, Tensor) or loss.data.size != 1 or loss.ndim > 1:
            shape = getattr(loss, "shape", None)
            raise TapeError(f"backward() needs a scalar loss, got shape {shape}")
        if loss.tape is not self:
            raise TapeError("loss was not produced on this tape")
        grads = {loss.node: np.ones_like(loss.data)}
        leaf_grads = {}
        for i in range(loss.node, -1, -1):
            g = grads.pop(i, None)
            if g is None:
                continue
            kind, parents, vjp = self.nodes[i]
            if vjp is None:
                leaf_grads[i] = g
                continue
            for pid, pg in zip(parents, vjp(g)):
                if pid is None or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        out = {}
        for handle, node in self.handles.items():
            g = leaf_grads.get(node)
            if g is None:
                g = np.zeros(self.leaf_shapes[node])
            out[handle] = g
        self.consumed = True
        self.nodes = []
        return out


def _tracked_tape(*tensors):
    tape = active_tape()
    if tape is None:
        return None
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is tape and t.node is not None:
            return tape
    return None


def _op(kind, data, inputs, vjp):
    """Wrap ``data`` as the output of ``kind``; record it when any input is tracked."""
    tape = _tracked_tape(*inputs)
    if tape is None:
        return Tensor(data)
    parents = tuple(t.node if (t.tape is tape) else None for t in inputs)
    return tape._record(kind, data, parents, vjp)


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --------------------------------------------------------------------------
# elementwise binary


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _op("add", a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _op("sub", a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _op(
        "mul", ad * bd, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape))
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return _op("div", out, (a, b), vjp)


def neg(a):
    a = as_tensor(a)
    return _op("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p):
    """``a ** p`` for a constant real exponent."""
    a = as_tensor(a)
    p = float(p)
    ad = a.data
    return _op("power", ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _op("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# --------------------------------------------------------------------------
# elementwise unary


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0.0
    return _op("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _op("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    ad = a.data
    return _op("log", np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _op("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _op("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def abs_(a):
    a = as_tensor(a)
    s = np.sign(a.data)
    return _op("abs", np.abs(a.data), (a,), lambda g: (g * s,))


def sign(a):
    """Elementwise sign with ``sign(0) = 0``; gradient is zero everywhere."""
    a = as_tensor(a)
    return _op("sign", np.sign(a.data), (a,), lambda g: (np.zeros_like(g),))


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; gradient passes only strictly inside the interval."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad > lo) & (ad < hi)
    return _op("clip", np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


# --------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _op("sum", out, (a,), lambda g: (np.array(_expand(g, shape, axes, keepdims)),))


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    shape = a.shape
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return _op("mean", out, (a,), lambda g: (np.array(_expand(g, shape, axes, keepdims)) / n,))


def max_(a, axis=-1, keepdims=False):
    """Maximum along one axis; gradient routed to the first maximiser."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)
    if not keepdims:
        out = np.squeeze(out, axis)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, np.expand_dims(idx, axis), gg, axis)
        return (full,)

    return _op("max", out, (a,), vjp)


def logsumexp(a, axis=-1, keepdims=False):
    """Stable ``log(sum(exp(a)))`` along ``axis`` (max-shifted)."""
    a = as_tensor(a)
    axis = axis % a.ndim
    ad = a.data
    moved = np.moveaxis(ad, axis, -1)
    flat = moved.reshape(-1, moved.shape[-1])
    out = kernels.logsumexp_rows(flat).reshape(moved.shape[:-1])
    out_k = np.expand_dims(out, axis)
    soft = np.exp(ad - out_k)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * soft,)

    return _op("logsumexp", out_k if keepdims else out, (a,), vjp)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    axis = axis % a.ndim
    ad = a.data
    m = ad.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(ad - m).sum(axis=axis, keepdims=True))
    out = ad - lse
    soft = np.exp(out)
    return _op("log_softmax", out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(a, axis=-1):
    a = as_tensor(a)
    axis = axis % a.ndim
    ad = a.data
    e = np.exp(ad - ad.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _op("softmax", out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def l1_norm(a, axis=-1):
    return sum_(abs_(a), axis)


def l2_norm(a, axis=-1):
    a = as_tensor(a)
    axis = axis % a.ndim
    ad = a.data
    out = np.sqrt((ad * ad).sum(axis=axis))

    def vjp(g):
        denom = np.expand_dims(out, axis)
        safe = np.where(denom > 0.0, denom, 1.0)
        return (np.where(denom > 0.0, ad / safe, 0.0) * np.expand_dims(g, axis),)

    return _op("l2_norm", out, (a,), vjp)


# --------------------------------------------------------------------------
# structural


def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, shape) from None
    return _op("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a):
    a = as_tensor(a)
    return _op("transpose", a.data.T, (a,), lambda g: (g.T,))


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _op("getitem", a.data[idx], (a,), vjp)


def broadcast_to(a, shape):
    a = as_tensor(a)
    src = a.shape
    try:
        out = np.array(np.broadcast_to(a.data, shape))
    except ValueError:
        raise ShapeError("broadcast_to", src, shape) from None
    return _op("broadcast_to", out, (a,), lambda g: (unbroadcast(g, src),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        other = [s for i, s in enumerate(t.shape) if i != axis]
        first = [s for i, s in enumerate(tensors[0].shape) if i != axis]
        if t.ndim != ndim or other != first:
            raise ShapeError("concat", tensors[0].shape, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _op("concat", out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def where(mask, a, b):
    """Select ``a`` where ``mask`` (a constant boolean array) holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape
    out = np.where(mask, a.data, b.data)
    return _op(
        "where",
        out,
        (a, b),
        lambda g: (unbroadcast(np.where(mask, g, 0.0), sa), unbroadcast(np.where(mask, 0.0, g), sb)),
    )


# --------------------------------------------------------------------------
# Gaussian pieces


def gaussian_log_density(x, mean, log_var):
    """Diagonal Gaussian log-density summed over the last axis.

    Includes the full normalising constant. Variances are floored at
    ``VAR_FLOOR``; where the floor binds, ``log_var`` receives no gradient.
    """
    x, mean, log_var = as_tensor(x), as_tensor(mean), as_tensor(log_var)
    try:
        shape = np.broadcast_shapes(x.shape, mean.shape, log_var.shape)
    except ValueError:
        raise ShapeError("gaussian_log_density", x.shape, mean.shape, log_var.shape) from None
    if not np.all(np.isfinite(log_var.data)):
        raise ValueError("gaussian_log_density: non-finite log_var")
    xd, md, lv = (np.broadcast_to(t.data, shape) for t in (x, mean, log_var))
    lead = shape[:-1]
    d = shape[-1] if shape else 1
    flat = lambda v: v.reshape(-1, d)  # noqa: E731
    out = kernels.gauss_logpdf_rows(flat(xd), flat(md), flat(lv), VAR_FLOOR).reshape(lead)
    raw = np.exp(lv)
    free = raw >= VAR_FLOOR
    var = np.where(free, raw, VAR_FLOOR)
    r = xd - md

    def vjp(g):
        gk = np.expand_dims(g, -1)
        dx = -gk * r / var
        dlv = gk * np.where(free, -0.5 + r * r / (2.0 * var), 0.0)
        return unbroadcast(dx, x.shape), unbroadcast(-dx, mean.shape), unbroadcast(dlv, log_var.shape)

    return _op("gaussian_log_density", out, (x, mean, log_var), vjp)


def reparameterize(mean, log_var, rng=None, noise=None):
    """Pathwise Gaussian sample ``mean + std * noise`` with noise ~ N(0, I).

    ``noise`` may be supplied to reuse a frozen draw; otherwise it is taken
    from ``rng``. Gradients reach ``mean`` and ``log_var`` only.
    """
    mean, log_var = as_tensor(mean), as_tensor(log_var)
    if mean.shape != log_var.shape:
        raise ShapeError("reparameterize", mean.shape, log_var.shape)
    if noise is None:
        noise = rng.normal(mean.shape)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != mean.shape:
        raise ShapeError("reparameterize", mean.shape, noise.shape)
    with np.errstate(over="ignore"):
        raw = np.exp(log_var.data)
    free = raw >= VAR_FLOOR
    std = np.sqrt(np.where(free, raw, VAR_FLOOR))
    out = mean.data + std * noise
    return _op(
        "reparameterize",
        out,
        (mean, log_var),
        lambda g: (g, np.where(free, 0.5 * g * std * noise, 0.0)),
    )


def cross_entropy(logits, labels):
    """Mean negative log-softmax at integer ``labels``."""
    logits = as_tensor(logits)
    onehot = np.eye(logits.shape[-1])[np.asarray(labels)]
    return -(log_softmax(logits) * onehot).sum(axis=-1).mean()


LOG_2PI = math.log(2.0 * math.pi)
