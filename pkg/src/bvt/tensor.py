"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation used by the models lives here. Graphs are
define-by-run: each op appends a record to a Tape, and ``backward`` walks the
records once in reverse. Tapes from independent subgraphs are merged lazily
(union-find) when an op combines their tensors, so callers never manage tape
scope explicitly.
"""

from __future__ import annotations

import struct

import numpy as np

DEFAULT_DTYPE = np.float64
TENSOR_MAGIC = b"BVTTENS0"


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TapeError(RuntimeError):
    """Invalid tape use: detached tensor, or backward on a consumed tape."""


_GRAD_ENABLED = True
_KINK_LOG: list | None = None


class no_grad:
    """Context manager: ops executed inside build no tape records."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class record_kinks:
    """Collect a non-smoothness signature during forward passes.

    Ops with kinks (relu, abs, sign, maximum) log which side of the kink each
    element fell on. Two forward passes crossed a kink iff their signatures
    differ; the finite-difference harness uses this to exclude coordinates
    whose central-difference interval straddles a non-smooth point.
    """

    def __enter__(self):
        global _KINK_LOG
        self._prev = _KINK_LOG
        _KINK_LOG = []
        self.log = _KINK_LOG
        return self

    def __exit__(self, *exc):
        global _KINK_LOG
        _KINK_LOG = self._prev
        return False


def _log_kink(arr):
    if _KINK_LOG is not None:
        _KINK_LOG.append(np.array(arr, copy=True))


def kink_signatures_equal(a, b):
    """True if two signature lists describe the same smooth region."""
    if len(a) != len(b):
        return False
    return all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


class Tape:
    """Ordered operation records; every record's inputs precede it."""

    __slots__ = ("records", "consumed", "_parent", "_size")

    def __init__(self):
        self.records = []
        self.consumed = False
        self._parent = None
        self._size = 1

    def root(self) -> "Tape":
        t = self
        while t._parent is not None:
            t = t._parent
        s = self
        while s._parent is not None and s._parent is not t:
            s._parent, s = t, s._parent
        return t

    @staticmethod
    def merge(a: "Tape", b: "Tape") -> "Tape":
        ra, rb = a.root(), b.root()
        if ra is rb:
            return ra
        if ra._size < rb._size:
            ra, rb = rb, ra
        ra.records.extend(rb.records)
        rb.records = []
        rb._parent = ra
        ra._size += rb._size
        return ra


class OpRecord:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tensor:
    """Dense n-d array of reals with an optional gradient record."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = None

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
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # arithmetic sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _apply(name, inputs, value, backward_fn) -> Tensor:
    out = Tensor(value)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = None
        for t in inputs:
            if t.tape is None:
                continue
            r = t.tape.root()
            if r.consumed:
                continue
            tape = r if tape is None else Tape.merge(tape, r)
        if tape is None:
            tape = Tape()
        out.tape = tape
        tape.root().records.append(OpRecord(name, tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_value(name, a, b, fn):
    try:
        return fn(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from e


# ---------------------------------------------------------------------------
# elementwise suite


def add(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    v = _broadcast_value("add", a, b, np.add)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply("add", (a, b), v, bwd)


def sub(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    v = _broadcast_value("sub", a, b, np.subtract)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _apply("sub", (a, b), v, bwd)


def mul(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    v = _broadcast_value("mul", a, b, np.multiply)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _apply("mul", (a, b), v, bwd)


def div(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    v = _broadcast_value("div", a, b, np.divide)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    return _apply("div", (a, b), v, bwd)


def neg(a):
    a = _as_tensor(a)

    def bwd(g):
        return (-g,)

    return _apply("neg", (a,), -a.data, bwd)


def abs_(a):
    a = _as_tensor(a)
    s = np.sign(a.data)  # subgradient at 0 is 0
    _log_kink(s)

    def bwd(g):
        return (g * s,)

    return _apply("abs", (a,), np.abs(a.data), bwd)


def sign(a):
    """Sign with zero gradient everywhere."""
    a = _as_tensor(a)
    s = np.sign(a.data)
    _log_kink(s)

    def bwd(g):
        return (np.zeros_like(a.data),)

    return _apply("sign", (a,), s, bwd)


def pow_(a, p):
    """Elementwise power with a scalar exponent.

    Non-integer exponents require a nonnegative base.
    """
    a = _as_tensor(a)
    p = float(p)
    if p != int(p) and np.any(a.data < 0):
        raise ValueError(f"pow: non-integer exponent {p} requires base >= 0")
    v = np.power(a.data, p)
    ad = a.data

    def bwd(g):
        if p == 0.0:
            return (np.zeros_like(ad),)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(ad, p - 1.0)
        d = np.where(np.isfinite(d), d, 0.0)
        return (g * d,)

    return _apply("pow", (a,), v, bwd)


def sqrt(a):
    return pow_(a, 0.5)


def exp(a):
    a = _as_tensor(a)
    v = np.exp(a.data)

    def bwd(g):
        return (g * v,)

    return _apply("exp", (a,), v, bwd)


def log(a):
    a = _as_tensor(a)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _apply("log", (a,), np.log(a.data), bwd)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    _log_kink(mask)

    def bwd(g):
        return (g * mask,)

    return _apply("relu", (a,), np.maximum(a.data, 0), bwd)


def maximum(a, b):
    """Elementwise max; gradient of a tie routes to the first argument."""
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    v = _broadcast_value("maximum", a, b, np.maximum)
    wa = np.broadcast_to(a.data, v.shape) >= np.broadcast_to(b.data, v.shape)
    _log_kink(wa)

    def bwd(g):
        return _unbroadcast(g * wa, a.shape), _unbroadcast(g * ~wa, b.shape)

    return _apply("maximum", (a, b), v, bwd)


def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    v = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _apply("sum", (a,), v, bwd)


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    v = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    n = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _apply("mean", (a,), v, bwd)


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    try:
        v = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from e

    def bwd(g):
        return (g.reshape(old),)

    return _apply("reshape", (a,), v, bwd)


def transpose(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _apply("transpose", (a,), a.data.transpose(axes), bwd)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        v = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(sizes)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _apply("concat", tuple(tensors), v, bwd)


def slice_(a, key):
    """Basic indexing (ints, slices, Ellipsis); no fancy index arrays."""
    a = _as_tensor(a)
    v = a.data[key]
    shape = a.shape

    def bwd(g):
        gz = np.zeros(shape, dtype=g.dtype)
        gz[key] = g
        return (gz,)

    return _apply("slice", (a,), v, bwd)


def broadcast_to(a, shape):
    a = _as_tensor(a)
    try:
        v = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise DimensionError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from e
    old = a.shape

    def bwd(g):
        return (_unbroadcast(g, old),)

    return _apply("broadcast_to", (a,), v, bwd)


# ---------------------------------------------------------------------------
# linear algebra and normalization


def matmul(a, b):
    """Matrix product with numpy stacked-matmul semantics on leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")
    try:
        v = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul: cannot broadcast batch dims of {a.shape} and {b.shape}") from e
    ad, bd = a.data, b.data

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _apply("matmul", (a, b), v, bwd)


def softmax(x, axis=-1):
    """Numerically stable softmax; slices along `axis` sum to 1."""
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} out of bounds for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _apply("softmax", (x,), y, bwd)


def l2_norm(x, axis=-1, eps=1e-12, keepdims=False):
    """sqrt(sum of squares + eps^2) along an axis.

    eps sits inside the root purely to stabilize the gradient at the origin;
    with eps=0 the exact norm (and its 0/0 gradient at zero vectors) is
    returned unmasked.
    """
    x = _as_tensor(x)
    if eps < 0:
        raise ValueError("l2_norm: eps must be >= 0")
    ss = (x.data * x.data).sum(axis=axis, keepdims=True)
    nk = np.sqrt(ss + eps * eps)
    v = nk if keepdims else np.squeeze(nk, axis=axis)
    xd = x.data

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * xd / nk,)

    return _apply("l2_norm", (x,), v, bwd)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor):
    """Populate grads of everything `loss` depends on.

    Requires a scalar attached to a live tape; a second call on the same tape
    is rejected.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.tape is None:
        raise TapeError("backward: tensor is detached from any tape")
    tape = loss.tape.root()
    if tape.consumed:
        raise TapeError("backward: tape already consumed (stale epoch)")
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            inp.grad = gi if inp.grad is None else inp.grad + gi
    tape.consumed = True
    tape.records.clear()


# ---------------------------------------------------------------------------
# verification harness


def finite_difference_check(f, x: Tensor, h: float = 1e-5, coords=None, return_details: bool = False):
    """Max relative error between autodiff and central differences.

    ``f`` maps a Tensor to a scalar Tensor. Coordinates whose +/-h interval
    crosses a non-smooth point (detected via kink signatures) are excluded.
    Returns max of |ad - fd| / max(1, |ad|); with return_details also the
    number of checked and skipped coordinates.
    """
    if not x.data.flags["C_CONTIGUOUS"]:
        x.data = np.ascontiguousarray(x.data)
    x.zero_grad()
    loss = f(x)
    backward(loss)
    if x.grad is None:
        raise TapeError("finite_difference_check: x received no gradient; set requires_grad")
    g = x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    idxs = range(flat.size) if coords is None else coords
    worst = 0.0
    checked = skipped = 0
    for i in idxs:
        orig = flat[i]
        with no_grad():
            flat[i] = orig + h
            with record_kinks() as kp:
                fp = f(x).data.reshape(-1)[0]
            flat[i] = orig - h
            with record_kinks() as km:
                fm = f(x).data.reshape(-1)[0]
            flat[i] = orig
        if not kink_signatures_equal(kp.log, km.log):
            skipped += 1
            continue
        fd = (fp - fm) / (2 * h)
        err = abs(fd - g[i]) / max(1.0, abs(g[i]))
        worst = max(worst, err)
        checked += 1
    if return_details:
        return worst, checked, skipped
    return worst


# ---------------------------------------------------------------------------
# flat binary serialization


def write_tensor(fh, array: np.ndarray):
    """Write magic, u32 rank, u32 extents, then little-endian f64 row-major."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(8)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def save_tensor(path, array: np.ndarray):
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
