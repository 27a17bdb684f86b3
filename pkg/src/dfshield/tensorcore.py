"""Dense float64 tensors with tape-based reverse-mode differentiation.

Usage::

    with Tape() as tape:
        w = Tensor(np.ones(3), requires_grad=True, name="w")
        loss = reduce_sum(w * w)
    grads = backward(loss, {"w": w})

Operations performed while a tape is active, on at least one input that
requires grad, are appended to that tape.  Outside a tape nothing is recorded
and results are plain constants.

Broadcasting is deliberately narrow: two operands must have equal shapes, or
the shape of one must be a trailing suffix of the other (a bias of shape
``(F,)`` against ``(N, F)``, a scalar against anything).
"""
import hashlib
import threading

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive operations.

    Each entry is ``(output_id, inputs, vjp)`` where ``vjp(g)`` maps the
    output cotangent to one cotangent per input (``None`` for inputs that do
    not require grad).  Node ids grow monotonically, so every operand id
    precedes the id of its consumer.
    """

    def __init__(self):
        self.entries = []
        self._next_id = 0

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def _register(self, t):
        if t._tape is not self:
            t._tape = self
            t.node_id = self._next_id
            self._next_id += 1
        return t.node_id

    def record(self, out, inputs, vjp):
        for t in inputs:
            if t.requires_grad:
                self._register(t)
        self._register(out)
        self.entries.append((out.node_id, inputs, vjp))

    def backward(self, loss):
        """Cotangents for every node reachable from ``loss``, keyed by node id."""
        if loss.data.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise GradientError("loss was not recorded on this tape")
        grads = {loss.node_id: np.ones_like(loss.data)}
        for out_id, inputs, vjp in reversed(self.entries):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            in_grads = vjp(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(t.node_id)
                grads[t.node_id] = gi if prev is None else prev + gi
        return grads


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "_tape", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self._tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data, inputs, vjp):
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    tape.record(out, inputs, vjp)
    return out


# -- elementwise binary ------------------------------------------------------

def _check_broadcast(a, b):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sa) <= len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    raise ShapeError(f"shape mismatch: {sa} vs {sb} (only leading-dimension broadcast allowed)")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb
    return _emit(out, (a, b), vjp)


def neg(a):
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _emit(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


# -- elementwise unary -------------------------------------------------------

def relu(a):
    a = as_tensor(a)
    pos = a.data > 0
    return _emit(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def clamp(a, lo=None, hi=None):
    a = as_tensor(a)
    lo_v = -np.inf if lo is None else lo
    hi_v = np.inf if hi is None else hi
    inside = (a.data >= lo_v) & (a.data <= hi_v)
    return _emit(np.clip(a.data, lo_v, hi_v), (a,), lambda g: (g * inside,))


def sign(a):
    a = as_tensor(a)
    return _emit(np.sign(a.data), (a,), lambda g: (np.zeros_like(g),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (g * 0.5 / out,))


def square(a):
    a = as_tensor(a)
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# -- reductions and shape ----------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def reduce_sum(a, axis=None):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)
    return _emit(a.data.sum(axis=axes), (a,), vjp)


def reduce_mean(a, axis=None):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g / count, axes), shape).copy(),)
    return _emit(a.data.sum(axis=axes) / count, (a,), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a, index):
    """Basic (slice-based) indexing, e.g. ``take(x, (Ellipsis, slice(1, None)))``."""
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[index] += g
        return (out,)
    return _emit(a.data[index], (a,), vjp)


def pick(a, index):
    """Row-wise gather: ``out[i] = a[i, index[i]]`` for a 2-D ``a``."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def vjp(g):
        out = np.zeros(a.shape)
        out[rows, idx] = g
        return (out,)
    return _emit(a.data[rows, idx], (a,), vjp)


# -- convolution -------------------------------------------------------------

def conv2d(x, w, pad=1):
    """Stride-1 zero-padded cross-correlation, NCHW input, OIHW weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape} vs weight {w.shape}")
    out = _kernels.conv2d_forward(x.data, w.data, pad)

    def vjp(g):
        gx = gw = None
        if x.requires_grad:
            gx = _kernels.conv2d_backward_input(g, w.data, pad, x.shape[2], x.shape[3])
        if w.requires_grad:
            gw = _kernels.conv2d_backward_weight(g, x.data, pad, w.shape[2], w.shape[3])
        return gx, gw
    return _emit(out, (x, w), vjp)


# -- classification losses ---------------------------------------------------

def log_softmax(logits):
    """Row-wise log-softmax over the last axis, stabilised by max-subtraction."""
    x = as_tensor(logits)
    if x.ndim != 2:
        raise ShapeError(f"log_softmax expects [batch x C], got {x.shape}")
    if x.shape[0] == 0:
        raise ShapeError("log_softmax on an empty batch")
    if x.shape[1] < 2:
        raise ShapeError(f"log_softmax needs at least 2 classes, got {x.shape[1]}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    soft = np.exp(out)
    return _emit(out, (x,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} vs logits {logits.shape}")
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    logp = log_softmax(logits)
    return neg(reduce_mean(pick(logp, labels)))


def kl_divergence(p_logits, q_logits):
    """Batch-mean KL(softmax(p) || softmax(q)); terms with p == 0 contribute 0."""
    p_logits, q_logits = as_tensor(p_logits), as_tensor(q_logits)
    if p_logits.shape != q_logits.shape:
        raise ShapeError(f"kl_divergence shape mismatch: {p_logits.shape} vs {q_logits.shape}")
    lp = log_softmax(p_logits)
    lq = log_softmax(q_logits)
    return reduce_mean(reduce_sum(exp(lp) * (lp - lq), axis=1))


# -- gradients ---------------------------------------------------------------

def backward(loss, wrt):
    """Gradients of scalar ``loss`` w.r.t. the leaves in ``wrt``.

    ``wrt`` is a mapping name -> Tensor (or a sequence of Tensors, in which
    case a list is returned).  Leaves the loss does not depend on receive
    zeros.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise GradientError("loss is not on an active tape (nothing requires grad)")
    table = loss._tape.backward(loss)

    def lookup(t):
        if t._tape is loss._tape and t.node_id in table:
            return np.asarray(table[t.node_id], dtype=np.float64).reshape(t.shape)
        return np.zeros(t.shape)

    if isinstance(wrt, dict):
        return {k: lookup(t) for k, t in wrt.items()}
    return [lookup(t) for t in wrt]


def numerical_gradient(fn, x, h=1e-5):
    """Central finite differences of scalar ``fn`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = fn(x)
        flat[i] = keep - h
        down = fn(x)
        flat[i] = keep
        gflat[i] = (up - down) / (2 * h)
    return out


# -- random numbers ----------------------------------------------------------

def _name_key(name):
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Seeded, splittable random source.

    Stream: numpy PCG64 seeded from ``SeedSequence([seed, k1, k2, ...])`` where
    each ``k`` is the first 8 bytes (little-endian) of SHA-256 of a split
    name.  ``Rng(s).split("synth")`` therefore depends only on ``(s, "synth")``
    and not on how much of the parent stream was consumed.
    """

    def __init__(self, seed, key=()):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.key = tuple(key)
        seq = np.random.SeedSequence([self.seed, *self.key])
        self.gen = np.random.Generator(np.random.PCG64(seq))

    def split(self, name):
        return Rng(self.seed, self.key + (_name_key(name),))

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, depth={len(self.key)})"
