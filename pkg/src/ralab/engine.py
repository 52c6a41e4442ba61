"""Reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run: every op executes eagerly on numpy arrays and records its
inputs plus a backward closure on the output node. The implicit tape (nodes
ordered by a global creation counter) is the computation graph; ``backward``
walks the ancestors of a scalar output in reverse creation order, so each
node is visited exactly once and gradient accumulation order is fixed.

The op set is deliberately small: exactly what the convolutional backbone,
the contrastive head, the losses, and the differentiable view transforms
need. Everything is float64 and every op output is checked for NaN/Inf;
violations raise a NumericError naming the op instead of propagating
silently.
"""

from __future__ import annotations

import itertools

import numpy as np

from .exceptions import NumericError, ShapeError, UsageError

_counter = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (forward-only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Leaves are created directly from data; interior nodes are created by
    ops and carry a backward closure. ``grad`` has the same shape as
    ``values`` once ``backward`` has run.
    """

    __slots__ = ("values", "requires_grad", "grad", "_op", "_inputs", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        self.values = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise NumericError("tensor created with non-finite values")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._op = "leaf"
        self._inputs = ()
        self._backward = None
        self._id = next(_counter)

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(op={self._op!r}, shape={self.values.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars and ndarrays are wrapped as constant leaves.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(op: str, values: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    """Build an op output node, checking finiteness and wiring the tape."""
    if not np.all(np.isfinite(values)):
        raise NumericError(f"op {op!r} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out._id = next(_counter)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op = op
        out._inputs = inputs
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._op = op
        out._inputs = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    v = a.values + b.values

    def back(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape)

    return _make("add", v, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    v = a.values - b.values

    def back(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(-g, b.values.shape)

    return _make("sub", v, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.values, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    v = a.values * b.values

    def back(g):
        return (_unbroadcast(g * b.values, a.values.shape),
                _unbroadcast(g * a.values, b.values.shape))

    return _make("mul", v, (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    if np.any(b.values == 0.0):
        raise NumericError("op 'div' has zero divisor")
    v = a.values / b.values

    def back(g):
        return (_unbroadcast(g / b.values, a.values.shape),
                _unbroadcast(-g * a.values / (b.values * b.values), b.values.shape))

    return _make("div", v, (a, b), back)


def relu(a: Tensor) -> Tensor:
    v = np.maximum(a.values, 0.0)

    def back(g):
        return (g * (a.values > 0.0),)

    return _make("relu", v, (a,), back)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        v = np.exp(a.values)

    def back(g):
        return (g * v,)

    return _make("exp", v, (a,), back)


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0.0):
        raise NumericError("op 'log' received non-positive input")
    v = np.log(a.values)

    def back(g):
        return (g / a.values,)

    return _make("log", v, (a,), back)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.values < 0.0):
        raise NumericError("op 'sqrt' received negative input")
    v = np.sqrt(a.values)

    def back(g):
        if np.any(v == 0.0):
            raise NumericError("op 'sqrt' backward at zero")
        return (g * 0.5 / v,)

    return _make("sqrt", v, (a,), back)


def clip01(a: Tensor) -> Tensor:
    """Clamp to [0, 1]; gradient passes through inside the closed interval."""
    v = np.clip(a.values, 0.0, 1.0)

    def back(g):
        return (g * ((a.values >= 0.0) & (a.values <= 1.0)),)

    return _make("clip01", v, (a,), back)


def maximum_scalar(a: Tensor, c: float) -> Tensor:
    """Elementwise max(a, c); ties route the gradient to a."""
    v = np.maximum(a.values, c)

    def back(g):
        return (g * (a.values >= c),)

    return _make("maximum_scalar", v, (a,), back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.values.shape[1] != b.values.shape[0]:
        raise ShapeError(f"op 'matmul' got shapes {a.values.shape} x {b.values.shape}")
    v = a.values @ b.values

    def back(g):
        return (g @ b.values.T if a.requires_grad else None,
                a.values.T @ g if b.requires_grad else None)

    return _make("matmul", v, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"op 'transpose' needs a 2-D tensor, got {a.values.shape}")
    return _make("transpose", a.values.T.copy(), (a,), lambda g: (g.T,))


def bmm_nt(a: Tensor, b: Tensor) -> Tensor:
    """Batched similarity product: (B,m,d) x (B,n,d) -> (B,m,n)."""
    if a.values.ndim != 3 or b.values.ndim != 3 or a.values.shape[::2] != b.values.shape[::2]:
        raise ShapeError(f"op 'bmm_nt' got shapes {a.values.shape} x {b.values.shape}")
    v = a.values @ b.values.transpose(0, 2, 1)

    def back(g):
        return (g @ b.values if a.requires_grad else None,
                g.transpose(0, 2, 1) @ a.values if b.requires_grad else None)

    return _make("bmm_nt", v, (a, b), back)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    v = a.values.reshape(shape)

    def back(g):
        return (g.reshape(a.values.shape),)

    return _make("reshape", v, (a,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    v = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", v, tensors, back)


def repeat_rows(a: Tensor, k: int) -> Tensor:
    """Repeat each leading-axis row k times: (B, ...) -> (B*k, ...)."""
    v = np.repeat(a.values, k, axis=0)

    def back(g):
        return (g.reshape((a.values.shape[0], k) + a.values.shape[1:]).sum(axis=1),)

    return _make("repeat_rows", v, (a,), back)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather a[i, idx[i]] per row."""
    idx = np.asarray(idx)
    if a.values.ndim != 2:
        raise ShapeError(f"op 'take_rows' needs a 2-D tensor, got {a.values.shape}")
    if idx.ndim != 1 or idx.shape[0] != a.values.shape[0]:
        raise ShapeError("op 'take_rows' index length mismatch")
    if np.any(idx < 0) or np.any(idx >= a.values.shape[1]):
        raise UsageError("op 'take_rows' index out of range")
    rows = np.arange(a.values.shape[0])
    v = a.values[rows, idx]

    def back(g):
        out = np.zeros_like(a.values)
        out[rows, idx] = g
        return (out,)

    return _make("take_rows", v, (a,), back)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    v = a.values.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.values.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.values.shape).copy(),)

    return _make("sum", np.asarray(v), (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.values.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.values.shape[ax] for ax in axis]))
    else:
        n = a.values.shape[axis]
    v = a.values.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.values.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.values.shape).copy(),)

    return _make("mean", np.asarray(v), (a,), back)


def masked_rowmax(a: Tensor, exclude_idx) -> Tensor:
    """Per-row max over columns j != exclude_idx[i]; first max wins ties."""
    idx = np.asarray(exclude_idx)
    if a.values.ndim != 2 or a.values.shape[1] < 2:
        raise ShapeError(f"op 'masked_rowmax' needs (n, >=2) tensor, got {a.values.shape}")
    rows = np.arange(a.values.shape[0])
    scratch = a.values.copy()
    scratch[rows, idx] = -np.inf
    arg = scratch.argmax(axis=1)
    v = a.values[rows, arg]

    def back(g):
        out = np.zeros_like(a.values)
        out[rows, arg] = g
        return (out,)

    return _make("masked_rowmax", v, (a,), back)


# ---------------------------------------------------------------------------
# softmax family


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis (numerically stabilized)."""
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    v = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * v).sum(axis=-1, keepdims=True)
        return (v * (g - dot),)

    return _make("softmax", v, (a,), back)


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis (numerically stabilized)."""
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    v = shifted - lse
    sm = np.exp(v)

    def back(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", v, (a,), back)


# ---------------------------------------------------------------------------
# image ops (NHWC layout)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, x (N,H,W,Ci), w (kh,kw,Ci,Co)."""
    if x.values.ndim != 4 or w.values.ndim != 4:
        raise ShapeError(f"op 'conv2d' got shapes {x.values.shape}, {w.values.shape}")
    n, h, wd, ci = x.values.shape
    kh, kw, wci, co = w.values.shape
    if wci != ci:
        raise ShapeError(f"op 'conv2d' channel mismatch: input {ci}, kernel {wci}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("op 'conv2d' kernel larger than padded input")
    xp = np.pad(x.values, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.values
    out = np.zeros((n, ho, wo, co))
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :]
            out += (patch.reshape(-1, ci) @ w.values[di, dj]).reshape(n, ho, wo, co)

    def back(g):
        g2 = g.reshape(-1, co)
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
        if w.requires_grad:
            gw = np.zeros_like(w.values)
        for di in range(kh):
            for dj in range(kw):
                if w.requires_grad:
                    patch = xp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :]
                    gw[di, dj] = patch.reshape(-1, ci).T @ g2
                if x.requires_grad:
                    gxp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += \
                        (g2 @ w.values[di, dj].T).reshape(n, ho, wo, ci)
        if x.requires_grad:
            gx = gxp[:, padding:padding + h, padding:padding + wd, :] if padding else gxp
        return gx, gw

    return _make("conv2d", out, (x, w), back)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max-pool, stride 2; ties go to the first window element in row-major order."""
    if x.values.ndim != 4:
        raise ShapeError(f"op 'maxpool2' needs NHWC, got {x.values.shape}")
    n, h, w, c = x.values.shape
    if h % 2 or w % 2:
        raise ShapeError(f"op 'maxpool2' needs even spatial dims, got {(h, w)}")
    h2, w2 = h // 2, w // 2
    win = x.values.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h2, w2, 4, c)
    arg = win.argmax(axis=3)
    v = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def back(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        return (gw.reshape(n, h2, w2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, c),)

    return _make("maxpool2", v, (x,), back)


def pad2d(x: Tensor, p: int) -> Tensor:
    """Zero-pad the spatial dims of an NHWC tensor by p on each side."""
    if p == 0:
        return x
    v = np.pad(x.values, ((0, 0), (p, p), (p, p), (0, 0)))

    def back(g):
        return (g[:, p:-p, p:-p, :],)

    return _make("pad2d", v, (x,), back)


def extract_windows(x: Tensor, tops, lefts, h: int, w: int) -> Tensor:
    """Per-row spatial crop: row i yields x[i, tops[i]:tops[i]+h, lefts[i]:lefts[i]+w, :]."""
    tops = np.asarray(tops)
    lefts = np.asarray(lefts)
    n = x.values.shape[0]
    rows = tops[:, None] + np.arange(h)[None, :]
    cols = lefts[:, None] + np.arange(w)[None, :]
    bidx = np.arange(n)[:, None, None]
    v = x.values[bidx, rows[:, :, None], cols[:, None, :], :]

    def back(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, (bidx, rows[:, :, None], cols[:, None, :]), g)
        return (gx,)

    return _make("extract_windows", v, (x,), back)


def flip_lr_where(x: Tensor, mask) -> Tensor:
    """Horizontally flip the rows of an NHWC tensor where mask is true."""
    m = np.asarray(mask, dtype=bool)[:, None, None, None]
    v = np.where(m, x.values[:, :, ::-1, :], x.values)

    def back(g):
        return (np.where(m, g[:, :, ::-1, :], g),)

    return _make("flip_lr_where", v, (x,), back)


def channel_mix(x: Tensor, mats) -> Tensor:
    """Per-row 3x3 channel mixing: out[b] = x[b] @ mats[b]."""
    m = np.asarray(mats, dtype=np.float64)
    v = np.einsum("bhwc,bcd->bhwd", x.values, m)

    def back(g):
        return (np.einsum("bhwd,bcd->bhwc", g, m),)

    return _make("channel_mix", v, (x,), back)


# ---------------------------------------------------------------------------
# composites


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two (n, d) tensors."""
    if a.values.shape != b.values.shape or a.values.ndim != 2:
        raise ShapeError(f"cosine_similarity got shapes {a.values.shape}, {b.values.shape}")
    num = tsum(mul(a, b), axis=1)
    na = sqrt(tsum(mul(a, a), axis=1))
    nb = sqrt(tsum(mul(b, b), axis=1))
    if np.any(na.values == 0.0) or np.any(nb.values == 0.0):
        raise NumericError("cosine_similarity undefined for zero-norm rows")
    return div(num, mul(na, nb))


def normalize_rows(a: Tensor) -> Tensor:
    """Scale each row of an (n, d) tensor to unit L2 norm."""
    sq = tsum(mul(a, a), axis=1, keepdims=True)
    if np.any(sq.values == 0.0):
        raise NumericError("normalize_rows undefined for zero-norm rows")
    return div(a, sqrt(sq))


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def backward(out: Tensor):
    """Populate .grad on every differentiable ancestor of a scalar output.

    Nodes are processed in strictly decreasing creation order, so each node
    is visited exactly once and accumulation order is identical across runs.
    """
    if out.values.size != 1:
        raise UsageError(f"backward requires a scalar output, got shape {out.values.shape}")
    if not out.requires_grad:
        raise UsageError("backward called on a tensor with no recorded graph")

    nodes = {}
    stack = [out]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        for parent in t._inputs:
            if parent.requires_grad and parent._id not in nodes:
                stack.append(parent)

    grads = {out._id: np.ones_like(out.values)}
    for tid in sorted(nodes, reverse=True):
        t = nodes[tid]
        g = grads.pop(tid, None)
        if g is None:
            continue
        if t._backward is None:
            _accumulate(t, g)
            continue
        for parent, pg in zip(t._inputs, t._backward(g)):
            if not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


def grad_check(fn, inputs, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn maps a list of leaf Tensors to a scalar Tensor. Error per element is
    |analytic - numeric| / max(1, |analytic|); the max over all elements of
    all inputs is returned.
    """
    leaves = [Tensor(t.values.copy(), requires_grad=True) for t in inputs]
    out = fn(leaves)
    backward(out)
    analytic = [lf.grad if lf.grad is not None else np.zeros_like(lf.values) for lf in leaves]

    worst = 0.0
    with no_grad():
        for k, leaf in enumerate(leaves):
            flat = leaf.values.reshape(-1)
            num = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = fn(leaves).item()
                flat[i] = orig - h
                fm = fn(leaves).item()
                flat[i] = orig
                num[i] = (fp - fm) / (2.0 * h)
            a = analytic[k].reshape(-1)
            err = np.abs(a - num) / np.maximum(1.0, np.abs(a))
            if err.size:
                worst = max(worst, float(err.max()))
    return worst
