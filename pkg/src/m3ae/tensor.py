"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation returns a new :class:`Tensor` that remembers its
inputs and a backward rule. Each tensor gets a creation sequence number from a
global counter, so sorting reachable nodes by that number in descending order
replays the recorded operations in reverse: every node is visited after all
of its consumers.

Broadcasting is deliberately narrow: operands must have equal shapes, one
operand must be a 0-d scalar, or the smaller shape must be a suffix of the
larger one (leading-axis broadcasting).
"""
import itertools
import threading
from contextlib import contextmanager

import numpy as np

from m3ae import kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class RankError(ValueError):
    """A tensor has the wrong number of dimensions for the operation."""


class EmptyAxisError(ValueError):
    """Reduction over an axis of length zero."""


_counter = itertools.count()
_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype.kind == "f" else np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._seq = next(_counter)
        self.name = name

    # -- introspection ---------------------------------------------------
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

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators --------------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data, parents, backward_fn):
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# -- broadcasting ------------------------------------------------------------
def _check_broadcast(sa, sb, op):
    if sa == sb or sa == () or sb == ():
        return
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    raise DimensionError(f"{op}: shapes {sa} and {sb} are not broadcast-compatible")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _binary_operands(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# -- elementwise ---------------------------------------------------------------
def add(a, b):
    a, b = _binary_operands(a, b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _binary_operands(a, b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _binary_operands(a, b)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), back)


def div(a, b):
    a, b = _binary_operands(a, b)
    _check_broadcast(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make(out, (a, b), back)


def scale(a, c):
    """Multiply by a Python scalar ``c``."""
    c = float(c)
    return _make(a.data * a.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * a.dtype.type(0.5) / out,))


def gelu(a):
    """Exact GELU, ``x * Phi(x)`` with the normal CDF written through erf."""
    ad = a.data
    out, cdf = kernels.gelu(ad, return_cdf=True)
    return _make(out, (a,), lambda g: (kernels.gelu_grad(ad, g, cdf),))


def softmax(a, axis=-1, key_mask=None):
    """Softmax along ``axis``.

    ``key_mask`` (last axis only) is a boolean ``[G, C]`` array; the rows of
    ``a`` flattened to ``[R, C]`` are split into ``G`` consecutive blocks that
    each share one mask row. Masked entries get probability exactly zero.
    """
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise EmptyAxisError("softmax over an empty axis")
    if axis != a.ndim - 1:
        if key_mask is not None:
            raise ValueError("key_mask is only supported on the last axis")
        moved = transpose(a, _move_last(a.ndim, axis))
        return transpose(softmax(moved), _inverse(_move_last(a.ndim, axis)))
    out = kernels.softmax(a.data, key_mask)
    return _make(out, (a,), lambda g: (kernels.softmax_grad(out, g),))


def layer_norm(x, weight=None, bias=None, eps=1e-6, axis=-1):
    """Standardize along ``axis`` then apply the optional affine map."""
    if not eps > 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        raise EmptyAxisError("layer_norm over an empty axis")
    if axis != x.ndim - 1:
        perm = _move_last(x.ndim, axis)
        return transpose(layer_norm(transpose(x, perm), weight, bias, eps), _inverse(perm))
    d = x.shape[-1]
    w = weight.data if weight is not None else np.ones(d, x.dtype)
    b = bias.data if bias is not None else np.zeros(d, x.dtype)
    y, xhat, rstd = kernels.layer_norm(x.data, w, b, eps)
    parents = [x] + [p for p in (weight, bias) if p is not None]

    def back(g):
        gx, gw, gb = kernels.layer_norm_grad(g, xhat, rstd, w)
        grads = [gx]
        if weight is not None:
            grads.append(gw)
        if bias is not None:
            grads.append(gb)
        return tuple(grads)

    return _make(y, parents, back)


def _move_last(ndim, axis):
    return tuple(i for i in range(ndim) if i != axis) + (axis,)


def _inverse(perm):
    return tuple(int(i) for i in np.argsort(perm))


# -- linear algebra and shape ops ------------------------------------------------
def matmul(a, b):
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2:
        raise RankError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), back)


def reshape(a, shape):
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = _inverse(axes)
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def index(a, key):
    """Basic (slice/integer) indexing; fancy indexing goes through gather_rows."""
    src, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(src, dtype=dtype)
        full[key] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[key]), (a,), back)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis):
            raise DimensionError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def gather_rows(t, idx):
    """Rows of a 2-d tensor picked by an integer index array of any shape."""
    if t.ndim != 2:
        raise RankError(f"gather_rows expects a 2-d tensor, got shape {t.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    n = t.shape[0]
    if idx.size:
        lo, hi = idx.min(), idx.max()
        if lo < 0 or hi >= n:
            bad = lo if lo < 0 else hi
            raise IndexError(f"gather_rows index {bad} out of range for {n} rows")
    d = t.shape[1]
    return _make(t.data[idx], (t,), lambda g: (kernels.scatter_add_rows(n, idx, g.reshape(-1, d)),))


def sum_(a, axis=None, keepdims=False):
    src = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(a.dtype, copy=True),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype), (a,), back)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    if count == 0:
        raise EmptyAxisError("mean over an empty axis")
    return scale(sum_(a, axis, keepdims), 1.0 / count)


def cross_entropy(logits, targets):
    """Per-row negative log-likelihood of ``targets`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise RankError(f"cross_entropy expects [N, V] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if targets.shape != (n,):
        raise DimensionError(f"cross_entropy: targets {targets.shape} for logits {logits.shape}")
    if n and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"cross_entropy target outside [0, {v})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    nll = (lse[:, 0] - shifted[rows, targets]).astype(z.dtype)

    def back(g):
        p = np.exp(shifted - lse)
        p[rows, targets] -= 1
        return ((p * g[:, None]).astype(z.dtype),)

    return _make(nll, (logits,), back)


def soft_cross_entropy(logits, target_probs):
    """Per-row ``-sum(q * log softmax(z))`` against fixed target distributions ``q``."""
    if logits.ndim != 2 or np.shape(target_probs) != logits.shape:
        raise DimensionError(f"soft_cross_entropy: logits {logits.shape} vs targets {np.shape(target_probs)}")
    z = logits.data
    q = np.asarray(target_probs, dtype=z.dtype)
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = -(q * logp).sum(axis=1)

    def back(g):
        return (((np.exp(logp) * q.sum(axis=1, keepdims=True) - q) * g[:, None]).astype(z.dtype),)

    return _make(out.astype(z.dtype), (logits,), back)


# -- reverse pass ------------------------------------------------------------------
def backward(loss):
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every leaf requiring grad."""
    if loss.ndim != 0:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss is not connected to any tensor requiring grad")
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad and id(p) not in nodes)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)

    grads = {id(loss): np.ones((), dtype=loss.dtype)}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = np.array(g, dtype=t.dtype, copy=True) if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = grads[k] + pg if k in grads else pg
