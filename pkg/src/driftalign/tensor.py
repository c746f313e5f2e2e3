"""Dense float32 tensors with reverse-mode autodiff over a closed op set.

Storage is always contiguous float32. Reductions, matmul and conv2d
accumulate internally in float64 before rounding the result back to
float32; gradient arrays stay float64 end to end. Every op validates its
output for NaN/Inf and raises instead of letting bad values propagate.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "GradientError",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "absolute",
    "sqrt",
    "exp",
    "log",
    "relu",
    "matmul",
    "conv2d",
    "avgpool2d",
    "reshape",
    "flatten",
    "tsum",
    "tmean",
    "log_softmax",
    "softmax",
    "channel_stats",
    "gradients",
    "backward",
]


class ShapeError(ValueError):
    """Operands have shapes the op cannot accept."""


class NonFiniteError(FloatingPointError):
    """An op received or produced NaN/Inf values."""


class GradientError(ValueError):
    """A gradient request cannot be satisfied (non-scalar loss, detached parameter, ...)."""


_grad_enabled = True


class no_grad:
    """Context manager that suspends tape recording for ops run inside it."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """A float32 array plus its position on the autodiff tape.

    ``parents`` holds the input tensors of the op that produced this one and
    ``vjps[i]`` maps an output gradient to the gradient w.r.t. ``parents[i]``
    (None for inputs that need no gradient). Leaf tensors have empty parents.
    """

    __slots__ = ("data", "requires_grad", "op", "parents", "vjps", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float32, order="C")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents = ()
        self.vjps = ()
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self.op!r}{flag})"

    # operator sugar; the real work lives in the module-level op functions
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Populate ``.grad`` (float64) on every reachable grad-requiring tensor."""
        for node, g in _backward_map(self).items():
            node.grad = g


def _wrap(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _result(op, data, parents, vjps):
    out = np.asarray(data, dtype=np.float32, order="C")
    _check_finite(out, op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.parents = tuple(parents)
        t.vjps = tuple(vjps)
    else:
        t.requires_grad = False
        t.parents = ()
        t.vjps = ()
    return t


def _unbroadcast(g, shape):
    # reduce a broadcast gradient back to the operand's shape
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.asarray(g, order="C")


def _broadcastable(a, b, op):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcastable(a, b, "add")
    return _result(
        "add",
        a.data + b.data,
        (a, b),
        (
            (lambda g: _unbroadcast(g, a.data.shape)) if a.requires_grad else None,
            (lambda g: _unbroadcast(g, b.data.shape)) if b.requires_grad else None,
        ),
    )


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcastable(a, b, "sub")
    return _result(
        "sub",
        a.data - b.data,
        (a, b),
        (
            (lambda g: _unbroadcast(g, a.data.shape)) if a.requires_grad else None,
            (lambda g: _unbroadcast(-g, b.data.shape)) if b.requires_grad else None,
        ),
    )


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcastable(a, b, "mul")
    ad = a.data.astype(np.float64)
    bd = b.data.astype(np.float64)
    return _result(
        "mul",
        a.data * b.data,
        (a, b),
        (
            (lambda g: _unbroadcast(g * bd, a.data.shape)) if a.requires_grad else None,
            (lambda g: _unbroadcast(g * ad, b.data.shape)) if b.requires_grad else None,
        ),
    )


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcastable(a, b, "div")
    ad = a.data.astype(np.float64)
    bd = b.data.astype(np.float64)
    return _result(
        "div",
        a.data / np.where(b.data == 0, np.nan, b.data),
        (a, b),
        (
            (lambda g: _unbroadcast(g / bd, a.data.shape)) if a.requires_grad else None,
            (lambda g: _unbroadcast(-g * ad / (bd * bd), b.data.shape)) if b.requires_grad else None,
        ),
    )


def neg(a):
    a = _wrap(a)
    return _result("neg", -a.data, (a,), ((lambda g: -g) if a.requires_grad else None,))


def absolute(a):
    a = _wrap(a)
    sign = np.sign(a.data).astype(np.float64)
    return _result(
        "absolute",
        np.abs(a.data),
        (a,),
        ((lambda g: g * sign) if a.requires_grad else None,),
    )


def sqrt(a):
    a = _wrap(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    root = out.astype(np.float64)

    def back(g):
        return g / (2.0 * root)

    return _result("sqrt", out, (a,), (back if a.requires_grad else None,))


def exp(a):
    a = _wrap(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data.astype(np.float64))
    out64 = out

    def back(g):
        return g * out64

    return _result("exp", out, (a,), (back if a.requires_grad else None,))


def log(a):
    a = _wrap(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data.astype(np.float64))
    ad = a.data.astype(np.float64)

    def back(g):
        return g / ad

    return _result("log", out, (a,), (back if a.requires_grad else None,))


def relu(a):
    a = _wrap(a)
    mask = (a.data > 0).astype(np.float64)

    def back(g):
        return g * mask

    return _result("relu", np.maximum(a.data, 0), (a,), (back if a.requires_grad else None,))


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.data.shape} @ {b.data.shape}")
    ad = a.data.astype(np.float64)
    bd = b.data.astype(np.float64)
    return _result(
        "matmul",
        ad @ bd,
        (a, b),
        (
            (lambda g: g @ bd.T) if a.requires_grad else None,
            (lambda g: ad.T @ g) if b.requires_grad else None,
        ),
    )


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlate a (b,C,H,W) batch with (Cout,C,kh,kw) filters.

    Implemented as im2col plus one float64 matmul; the input gradient is a
    scatter-add of the column gradient back into the padded image.
    """
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.data.shape}, {w.data.shape}")
    b, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride/padding ({stride}, {padding})")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"conv2d: kernel ({kh},{kw}) exceeds padded input ({h + 2 * padding},{wd + 2 * padding})")
    hout = (h + 2 * padding - kh) // stride + 1
    wout = (wd + 2 * padding - kw) // stride + 1

    xp = x.data.astype(np.float64)
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    # (b, Hout, Wout, C*kh*kw), one row per output position
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(b * hout * wout, cin * kh * kw)
    wmat = w.data.astype(np.float64).reshape(cout, cin * kh * kw)
    out = (cols @ wmat.T).reshape(b, hout, wout, cout).transpose(0, 3, 1, 2)

    def back_w(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * hout * wout, cout)
        return (gmat.T @ cols).reshape(cout, cin, kh, kw)

    def back_x(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * hout * wout, cout)
        gcols = (gmat @ wmat).reshape(b, hout, wout, cin, kh, kw)
        gpad = np.zeros((b, cin, h + 2 * padding, wd + 2 * padding))
        for ih in range(kh):
            for iw in range(kw):
                gpad[:, :, ih : ih + stride * hout : stride, iw : iw + stride * wout : stride] += (
                    gcols[:, :, :, :, ih, iw].transpose(0, 3, 1, 2)
                )
        if padding:
            gpad = gpad[:, :, padding:-padding, padding:-padding]
        return np.asarray(gpad, order="C")

    return _result(
        "conv2d",
        out,
        (x, w),
        (back_x if x.requires_grad else None, back_w if w.requires_grad else None),
    )


def avgpool2d(x, k):
    """Average over non-overlapping k-by-k windows of a (b,C,H,W) tensor."""
    x = _wrap(x)
    if x.data.ndim != 4:
        raise ShapeError(f"avgpool2d: expected 4-d input, got {x.data.shape}")
    b, c, h, w = x.data.shape
    if k < 1 or h % k or w % k:
        raise ShapeError(f"avgpool2d: window {k} does not tile input ({h},{w})")
    ho, wo = h // k, w // k
    xd = x.data.astype(np.float64).reshape(b, c, ho, k, wo, k)
    out = xd.mean(axis=(3, 5))
    scale = 1.0 / (k * k)

    def back(g):
        ge = np.broadcast_to(g[:, :, :, None, :, None] * scale, (b, c, ho, k, wo, k))
        return np.asarray(ge, order="C").reshape(b, c, h, w)

    return _result("avgpool2d", out, (x,), (back if x.requires_grad else None,))


def reshape(x, shape):
    x = _wrap(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.data.shape} as {shape}") from None
    src = x.data.shape

    def back(g):
        return np.asarray(g.reshape(src), order="C")

    return _result("reshape", out, (x,), (back if x.requires_grad else None,))


def flatten(x):
    """Collapse all but the leading axis: (b, ...) -> (b, rest)."""
    x = _wrap(x)
    if x.data.ndim < 1:
        raise ShapeError("flatten: input must have a batch axis")
    b = x.data.shape[0]
    return reshape(x, (b, int(x.data.size // max(b, 1))))


def _norm_axes(axis, ndim, op):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(a % ndim for a in axis)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"{op}: repeated axis in {axis}")
    return axes


def _expand_like(g, shape, axes, keepdims):
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(x, axis=None, keepdims=False):
    """Sum with float64 accumulation and a fixed (row-major) reduction order."""
    x = _wrap(x)
    axes = _norm_axes(axis, x.data.ndim, "tsum")
    out = x.data.astype(np.float64).sum(axis=axes, keepdims=keepdims)
    shape = x.data.shape

    def back(g):
        return np.asarray(_expand_like(g, shape, axes, keepdims), order="C")

    return _result("tsum", out, (x,), (back if x.requires_grad else None,))


def tmean(x, axis=None, keepdims=False):
    x = _wrap(x)
    axes = _norm_axes(axis, x.data.ndim, "tmean")
    out = x.data.astype(np.float64).mean(axis=axes, keepdims=keepdims)
    shape = x.data.shape
    count = 1
    for a in axes:
        count *= shape[a]
    inv = 1.0 / count

    def back(g):
        return np.asarray(_expand_like(g * inv, shape, axes, keepdims), order="C")

    return _result("tmean", out, (x,), (back if x.requires_grad else None,))


def log_softmax(x):
    """Row-wise log softmax of a 2-d tensor, computed via the max-shift identity."""
    x = _wrap(x)
    if x.data.ndim != 2:
        raise ShapeError(f"log_softmax: expected 2-d input, got {x.data.shape}")
    xd = x.data.astype(np.float64)
    z = xd - xd.max(axis=1, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(ls)

    def back(g):
        return g - p * g.sum(axis=1, keepdims=True)

    return _result("log_softmax", ls, (x,), (back if x.requires_grad else None,))


def softmax(x):
    return exp(log_softmax(x))


def channel_stats(x):
    """Spatial mean and population variance per sample and channel.

    For a (b,C,H,W) tensor returns two (b,C) tensors: the mean over the
    H*W positions of each channel and the mean squared deviation from it.
    Built from primitive ops so both outputs stay differentiable.
    """
    x = _wrap(x)
    if x.data.ndim != 4:
        raise ShapeError(f"channel_stats: expected 4-d input, got {x.data.shape}")
    m = tmean(x, axis=(2, 3))
    centered = sub(x, reshape(m, m.data.shape + (1, 1)))
    d2 = tmean(mul(centered, centered), axis=(2, 3))
    return m, d2


def _backward_map(loss):
    """Run one reverse sweep and return {tensor: float64 grad} for grad-requiring nodes."""
    if loss.data.shape != ():
        raise GradientError(f"loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not require grad; nothing to differentiate")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, vjp in zip(node.parents, node.vjps):
            if vjp is not None and id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(loss): np.ones((), dtype=np.float64)}
    out = {}
    for node in reversed(topo):
        g = grads.pop(id(node))
        out[node] = g
        for parent, vjp in zip(node.parents, node.vjps):
            if vjp is None:
                continue
            pg = vjp(g)
            if pg.shape != parent.data.shape:
                raise GradientError(f"{node.op}: gradient shape {pg.shape} != operand shape {parent.data.shape}")
            _check_finite(pg, f"{node.op} backward")
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return out


def gradients(loss, params):
    """Gradient of a scalar loss w.r.t. each tensor in ``params``.

    Returns float64 arrays in the order given. Raises GradientError if any
    parameter is unreachable from the loss (a silent zero would mask wiring
    bugs in the caller).
    """
    table = _backward_map(loss)
    out = []
    for i, p in enumerate(params):
        if not isinstance(p, Tensor) or not p.requires_grad:
            raise GradientError(f"params[{i}] is not a grad-requiring tensor")
        if p not in table:
            raise GradientError(f"params[{i}] is not reachable from the loss graph")
        out.append(table[p])
    return out


def backward(loss, wrt):
    """Gradients of a scalar loss for the requested parameters; others untouched."""
    return gradients(loss, wrt)
