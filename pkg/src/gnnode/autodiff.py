"""Reverse-mode automatic differentiation on a per-call tape.

Values are float64 numpy arrays wrapped in :class:`Tensor`. A :class:`Tape`
records operations in creation order while active (``with tape:``); since
creation order is already topological, ``Tape.backward`` is a single reverse
scan. Tapes are cheap, throwaway objects: training rebuilds one per window
batch, inference runs with no tape at all and pays only the numpy cost.

Design rules the rest of the package relies on:

* every op validates operand shapes up front and raises ``ShapeError``;
* every op checks its output for NaN/Inf and raises ``NonFiniteError``
  (disable with ``set_finite_checks(False)`` only in benchmarks);
* leaves must be registered with ``tape.watch`` (or ``ModelParams.watch``);
  after ``backward`` every watched leaf has a gradient, zeros if unreached;
* no op ever mutates an operand; optimizer updates replace ``Tensor.data``.

Gradient accumulation for fan-out nodes is sum-ordered by operation index,
so results are bitwise reproducible for a fixed op sequence.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _erf, expit as _expit

from .errors import NonFiniteError, ShapeError, GnnodeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_TAPE = None
_FINITE_CHECKS = True


def set_finite_checks(enabled):
    """Toggle per-op NaN/Inf detection. Returns the previous setting."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return prev


class TapeError(GnnodeError, RuntimeError):
    """Tape misuse: nested activation, backward from an untracked root."""


class Tensor:
    """A float64 ndarray plus (optionally) a position on the active tape."""

    __slots__ = ("data", "_tape", "_idx")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self._tape = None
        self._idx = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        tracked = self._tape is not None
        return f"Tensor(shape={self.data.shape}, tracked={tracked})"

    # operator sugar; all arithmetic routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class GradStore:
    """Read-only view of the gradients produced by one backward pass."""

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def of(self, tensor):
        """Gradient w.r.t. a tensor recorded on this tape (zeros if unreached)."""
        if tensor._tape is not self._tape:
            raise TapeError("tensor was not recorded on this tape")
        g = self._grads[tensor._idx]
        if g is None:
            return np.zeros_like(tensor.data)
        return np.asarray(g, dtype=np.float64).reshape(tensor.data.shape)


class Tape:
    """Ordered op record; lives for one forward/backward cycle."""

    __slots__ = ("_backs",)

    def __init__(self):
        self._backs = []

    def __enter__(self):
        global _TAPE
        if _TAPE is not None:
            raise TapeError("a tape is already active")
        _TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _TAPE
        _TAPE = None
        return False

    def _append(self, bw):
        self._backs.append(bw)
        return len(self._backs) - 1

    def watch(self, tensor):
        """Register a leaf. Idempotent for tensors already on this tape."""
        if tensor._tape is self:
            return tensor
        tensor._tape = self
        tensor._idx = self._append(None)
        return tensor

    def __len__(self):
        return len(self._backs)

    def backward(self, root):
        """Reverse accumulation from a scalar root; returns a GradStore.

        Consumed intermediate gradients are dropped eagerly so peak memory
        tracks the frontier, not the whole tape.
        """
        if root._tape is not self:
            raise TapeError("backward root is not on this tape")
        if root.data.size != 1:
            raise ShapeError("backward root must be scalar")
        n = len(self._backs)
        grads = [None] * n
        grads[root._idx] = np.ones_like(root.data)
        watched = [i for i, bw in enumerate(self._backs) if bw is None]
        watched_set = set(watched)
        for i in range(root._idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            bw = self._backs[i]
            if bw is not None:
                bw(g, grads)
                grads[i] = None  # free the frontier as soon as it is consumed
        out = [None] * n
        for i in watched_set:
            out[i] = grads[i]
        return GradStore(self, out)


def _acc(grads, idx, g):
    prev = grads[idx]
    grads[idx] = g if prev is None else prev + g


def _check(op, data):
    if _FINITE_CHECKS and not np.isfinite(np.sum(data)):
        raise NonFiniteError(op)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    """Wrap a value as an untracked tensor (alias kept for call-site clarity)."""
    return as_tensor(x)


def value(x):
    """Unwrap to ndarray."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _emit(op, data, inputs, bw_builder):
    """Create the result tensor, recording backward only when needed.

    ``bw_builder(idxs)`` receives the inputs' tape indices (or -1) and must
    return the backward closure. It is only invoked when a tape is active and
    at least one input is tracked on it.
    """
    _check(op, data)
    out = Tensor(data)
    tape = _TAPE
    if tape is None:
        return out
    idxs = tuple(t._idx if t._tape is tape else -1 for t in inputs)
    if all(i < 0 for i in idxs):
        return out
    out._tape = tape
    out._idx = tape._append(bw_builder(idxs))
    return out


def _unbroadcast(g, shape):
    """Reduce an upstream gradient back to a broadcast operand's shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def build(idxs):
        ia, ib = idxs

        def bw(g, grads):
            if ia >= 0:
                _acc(grads, ia, g @ bd.T)
            if ib >= 0:
                _acc(grads, ib, ad.T @ g)

        return bw

    return _emit("matmul", ad @ bd, (a, b), build)


def _binary(op, a, b, fwd, da, db):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape}, {b.shape}") from exc
    ash, bsh = a.shape, b.shape
    ad, bd = a.data, b.data

    def build(idxs):
        ia, ib = idxs

        def bw(g, grads):
            if ia >= 0:
                _acc(grads, ia, _unbroadcast(da(g, ad, bd, data), ash))
            if ib >= 0:
                _acc(grads, ib, _unbroadcast(db(g, ad, bd, data), bsh))

        return bw

    return _emit(op, data, (a, b), build)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b):
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y, o: g / y, lambda g, x, y, o: -g * o / y)


def neg(a):
    a = as_tensor(a)

    def build(idxs):
        (ia,) = idxs

        def bw(g, grads):
            _acc(grads, ia, -g)

        return bw

    return _emit("neg", -a.data, (a,), build)


def power(base, exponent):
    """Elementwise ``base ** exponent`` with gradients to both operands.

    The base must be strictly positive (callers pre-shift by their epsilon);
    that keeps ``d/d exponent = out * ln(base)`` well defined.
    """
    base, exponent = as_tensor(base), as_tensor(exponent)
    if np.any(base.data <= 0.0):
        raise NonFiniteError("power", "base must be strictly positive")
    bd, ed = base.data, exponent.data
    data = bd ** ed
    bs, es = base.shape, exponent.shape

    def build(idxs):
        ib, ie = idxs

        def bw(g, grads):
            if ib >= 0:
                _acc(grads, ib, _unbroadcast(g * ed * data / bd, bs))
            if ie >= 0:
                _acc(grads, ie, _unbroadcast(g * data * np.log(bd), es))

        return bw

    return _emit("power", data, (base, exponent), build)


def _unary(op, a, fwd, dfn):
    a = as_tensor(a)
    data = fwd(a.data)
    ad = a.data

    def build(idxs):
        (ia,) = idxs

        def bw(g, grads):
            _acc(grads, ia, g * dfn(ad, data))

        return bw

    return _emit(op, data, (a,), build)


def sigmoid(a):
    return _unary("sigmoid", a, _expit, lambda x, o: o * (1.0 - o))


def gelu(a):
    """Exact-erf GELU: x * Phi(x)."""
    return _unary(
        "gelu", a,
        lambda x: 0.5 * x * (1.0 + _erf(x * _INV_SQRT2)),
        lambda x, o: 0.5 * (1.0 + _erf(x * _INV_SQRT2))
        + x * _INV_SQRT2PI * np.exp(-0.5 * x * x),
    )


def silu(a):
    def d(x, o):
        s = _expit(x)
        return s * (1.0 + x * (1.0 - s))

    return _unary("silu", a, lambda x: x * _expit(x), d)


def softplus(a):
    return _unary("softplus", a, lambda x: np.logaddexp(0.0, x),
                  lambda x, o: _expit(x))


def layer_norm(x, gain, bias, eps=1e-12):
    """Row-wise layer normalization over the last axis of a 2-D tensor.

    Each row is shifted/scaled to mean 0, variance 1 (up to ``eps``) and then
    affinely transformed by ``gain`` and ``bias`` (shape ``(H,)``).
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim != 2:
        raise ShapeError(f"layer_norm expects a 2-D tensor, got {x.shape}")
    h = x.shape[1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError("layer_norm gain/bias must have shape (H,)")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data
    gd = gain.data

    def build(idxs):
        ix, ig, ib = idxs

        def bw(g, grads):
            if ix >= 0:
                dxhat = g * gd
                m1 = dxhat.mean(axis=1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
                _acc(grads, ix, inv * (dxhat - m1 - xhat * m2))
            if ig >= 0:
                _acc(grads, ig, (g * xhat).sum(axis=0))
            if ib >= 0:
                _acc(grads, ib, g.sum(axis=0))

        return bw

    return _emit("layer_norm", data, (x, gain, bias), build)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def build(idxs):
        def bw(g, grads):
            for k, idx in enumerate(idxs):
                if idx >= 0:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(offsets[k], offsets[k + 1])
                    _acc(grads, idx, g[tuple(sl)])

        return bw

    return _emit("concat", data, tensors, build)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape

    def build(idxs):
        (ia,) = idxs

        def bw(g, grads):
            _acc(grads, ia, g.reshape(old))

        return bw

    return _emit("reshape", a.data.reshape(shape), (a,), build)


def slice_(a, key):
    """Basic indexing (ints/slices); gradient scatters into a zero buffer."""
    a = as_tensor(a)
    data = a.data[key]
    shape = a.shape

    def build(idxs):
        (ia,) = idxs

        def bw(g, grads):
            buf = np.zeros(shape, dtype=np.float64)
            buf[key] = g
            _acc(grads, ia, buf)

        return bw

    return _emit("slice", data, (a,), build)


def take_rows(a, idx):
    """Row gather: out[k] = a[idx[k]]; idx may repeat rows."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("take_rows expects a 2-D tensor")
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def build(idxs):
        (ia,) = idxs

        def bw(g, grads):
            buf = np.zeros(shape, dtype=np.float64)
            np.add.at(buf, idx, g)
            _acc(grads, ia, buf)

        return bw

    return _emit("take_rows", a.data[idx], (a,), build)


def scatter_rows(a, idx, n_rows):
    """Row scatter-add: out[idx[k]] += a[k], out has ``n_rows`` rows."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("scatter_rows expects a 2-D tensor")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape[0] != a.shape[0]:
        raise ShapeError("scatter_rows: index length must match row count")
    data = np.zeros((n_rows, a.shape[1]), dtype=np.float64)
    np.add.at(data, idx, a.data)

    def build(idxs):
        (ia,) = idxs

        def bw(g, grads):
            _acc(grads, ia, g[idx])

        return bw

    return _emit("scatter_rows", data, (a,), build)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def build(idxs):
        (ia,) = idxs

        def bw(g, grads):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _acc(grads, ia, np.broadcast_to(gg, shape).copy())

        return bw

    return _emit("sum", data, (a,), build)


def mean_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def numeric_gradient(f, arrays, h=1e-6):
    """Central-difference gradients of scalar ``f(arrays)`` w.r.t. each array.

    Reference implementation for gradcheck; O(total parameters) evaluations,
    so keep the instances small.
    """
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(arrays)
            flat[i] = orig - h
            fm = f(arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(a, b, floor=1e-8):
    """max |a-b| / max(floor, |a|, |b|), elementwise-maxed scalar."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
