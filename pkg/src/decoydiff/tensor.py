"""Dense float32 tensors with reverse-mode autodiff.

Every array in the package flows through this module: a small set of
primitives, each with a hand-written backward, recorded on an implicit
per-computation graph. Broadcasting is restricted to leading-axis
expansion (one operand's shape must be a suffix of the other's) so the
gradient code stays auditable.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

_INV_SQRT2 = np.float32(0.7071067811865476)
_INV_SQRT2PI = np.float32(0.3989422804014327)
_LN_EPS = np.float32(1e-5)

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / probes)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense float32 value, optionally carrying a grad slot and graph node."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn",
                 "_op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward_fn is None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def transpose(self):
        return transpose(self)

    def backward(self, params=None):
        backward(self, params)


def _make(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._backward_done = False
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        out._op = op
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
        out._op = "leaf"
    return out


def _suffix_broadcast(a_shape, b_shape):
    """Validate leading-axis-only broadcasting; returns the output shape."""
    if a_shape == b_shape:
        return a_shape
    small, big = (a_shape, b_shape) if len(a_shape) < len(b_shape) else (b_shape, a_shape)
    if len(small) == len(big) or big[len(big) - len(small):] != small:
        raise ValueError(f"shapes {a_shape} and {b_shape} only broadcast over leading axes")
    return big


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    n_lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(n_lead)))


# -- elementwise ---------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _suffix_broadcast(a.shape, b.shape)
    out = a.data + b.data

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(out, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _suffix_broadcast(a.shape, b.shape)
    out = a.data - b.data

    def bw(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return _make(out, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _suffix_broadcast(a.shape, b.shape)
    out = a.data * b.data

    def bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(out, (a, b), bw, "mul")


def add_scalar(a: Tensor, s) -> Tensor:
    out = a.data + np.float32(s)
    return _make(out, (a,), lambda g: (g,), "add_scalar")


def mul_scalar(a: Tensor, s) -> Tensor:
    s = np.float32(s)
    out = a.data * s
    return _make(out, (a,), lambda g: (g * s,), "mul_scalar")


def gelu(a: Tensor) -> Tensor:
    x = a.data
    phi = (0.5 * (1.0 + erf(x * _INV_SQRT2))).astype(np.float32)
    out = x * phi

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (phi + x * pdf),)

    return _make(out, (a,), bw, "gelu")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        # subgradient clamp keeps the zero point finite
        return (g * 0.5 / np.maximum(out, 1e-12),)

    return _make(out, (a,), bw, "sqrt")


def clamp01(a: Tensor) -> Tensor:
    out = np.clip(a.data, 0.0, 1.0)

    def bw(g):
        inside = ((a.data >= 0.0) & (a.data <= 1.0)).astype(np.float32)
        return (g * inside,)

    return _make(out, (a,), bw, "clamp01")


# -- shape ops ------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "permute")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ValueError(f"transpose needs rank >= 2, got shape {a.shape}")
    axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    return permute(a, axes)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    _suffix_broadcast(a.shape, shape)
    out = np.broadcast_to(a.data, shape).copy()
    return _make(out, (a,), lambda g: (_reduce_to(g, a.shape),), "broadcast_to")


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), bw, "concat")


def slice_(a: Tensor, key) -> Tensor:
    out = np.asarray(a.data[key], dtype=np.float32)
    if out.base is not None:
        out = out.copy()

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make(out, (a,), bw, "slice")


# -- contractions and reductions -------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim == bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ValueError(f"matmul mismatch: {ad.shape} @ {bd.shape}")
    elif ad.ndim == bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ValueError(f"batched matmul mismatch: {ad.shape} @ {bd.shape}")
    else:
        raise ValueError(f"matmul supports 2-D or batched 3-D, got {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bw(g):
        sw = (0, 2, 1) if ad.ndim == 3 else (1, 0)
        return g @ bd.transpose(sw), ad.transpose(sw) @ g

    return _make(out, (a, b), bw, "matmul")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float32), (a,), bw, "sum")


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    s = sum_(a, axis, keepdims)
    return mul_scalar(s, 1.0 / n)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements (mean convention)."""
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = a.data.size
    out = np.asarray(np.mean(diff * diff, dtype=np.float32), dtype=np.float32)

    def bw(g):
        d = g * (2.0 / n) * diff
        return d, -d

    return _make(out, (a, b), bw, "mse")


# -- normalization and attention primitives --------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    k = x.data.shape[-1]
    if gain.shape != (k,) or bias.shape != (k,):
        raise ValueError(f"layer_norm gain/bias must be ({k},)")
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float32)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True, dtype=np.float32)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        dxhat = g * gain.data
        dvar = np.sum(dxhat * xc, axis=-1, keepdims=True, dtype=np.float32) * (-0.5) * inv ** 3
        dmu = -np.sum(dxhat, axis=-1, keepdims=True, dtype=np.float32) * inv \
            - dvar * 2.0 * np.mean(xc, axis=-1, keepdims=True, dtype=np.float32)
        dx = dxhat * inv + dvar * 2.0 * xc / k + dmu / k
        dgain = _reduce_to(g * xhat, gain.shape)
        dbias = _reduce_to(g, bias.shape)
        return dx.astype(np.float32), dgain, dbias

    return _make(out.astype(np.float32), (x, gain, bias), bw, "layer_norm")


def softmax(x: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-max-subtracted softmax over the last axis.

    `bias` is an optional additive pre-softmax term (suffix-broadcast onto
    x); a large positive entry pins the row's mass onto that position.
    """
    if x.data.shape[-1] == 0:
        raise ValueError("softmax over an axis of length 0")
    # bias-add and max-subtract run in float64 so a large constant bias
    # (c = 1e4) cannot quantize the logits away; output stays float32
    if bias is not None:
        _suffix_broadcast(bias.shape, x.shape)
        logits = x.data.astype(np.float64) + bias.data
        parents = (x, bias)
    else:
        logits = x.data.astype(np.float64)
        parents = (x,)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dlogit = s * (g - np.sum(g * s, axis=-1, keepdims=True, dtype=np.float32))
        if bias is not None:
            return dlogit, _reduce_to(dlogit, bias.shape)
        return (dlogit,)

    return _make(s.astype(np.float32), parents, bw, "softmax")


def pool_tokens(x: Tensor) -> Tensor:
    """Average-pool a row-major g*g token grid down to (g/2)*(g/2)."""
    t, c = x.data.shape
    g = int(round(t ** 0.5))
    if g * g != t or g % 2:
        raise ValueError(f"pool_tokens needs an even square token count, got {t}")
    h = g // 2
    out = x.data.reshape(h, 2, h, 2, c).mean(axis=(1, 3), dtype=np.float32).reshape(h * h, c)

    def bw(g_out):
        spread = np.broadcast_to(g_out.reshape(h, 1, h, 1, c) * 0.25, (h, 2, h, 2, c))
        return (spread.reshape(t, c).copy(),)

    return _make(out, (x,), bw, "pool_tokens")


def upsample_tokens(x: Tensor) -> Tensor:
    """Nearest-neighbor duplicate a g*g token grid up to (2g)*(2g)."""
    t, c = x.data.shape
    g = int(round(t ** 0.5))
    if g * g != t:
        raise ValueError(f"upsample_tokens needs a square token count, got {t}")
    out = np.broadcast_to(x.data.reshape(g, 1, g, 1, c), (g, 2, g, 2, c)).reshape(4 * t, c).copy()

    def bw(g_out):
        return (g_out.reshape(g, 2, g, 2, c).sum(axis=(1, 3), dtype=np.float32).reshape(t, c),)

    return _make(out, (x,), bw, "upsample_tokens")


# -- backward sweep ---------------------------------------------------------

class Tape:
    """Topologically ordered record of the primitives behind one output."""

    def __init__(self, nodes):
        self.nodes = nodes  # list of non-leaf Tensors, inputs-before-outputs

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t._backward_fn is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                stack.append((p, False))
        return cls(order)


def backward(out: Tensor, params=None):
    """Populate .grad on every requires_grad leaf reachable from `out`.

    `out` must be scalar. Leaves listed in `params` but unreachable from
    `out` get an explicit zero grad. A graph can only be swept once.
    """
    if out.data.shape != ():
        raise ValueError(f"backward requires a scalar output, got shape {out.shape}")
    if out._backward_done:
        raise RuntimeError("backward already ran on this output; re-record the forward pass")
    out._backward_done = True
    tape = Tape.from_output(out)
    grads = {id(out): np.ones((), dtype=np.float32)}
    if params is not None:
        for p in params:
            if p.requires_grad and p.is_leaf:
                p.grad = np.zeros_like(p.data)
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for parent, pg in zip(t._parents, t._backward_fn(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float32)
            if parent.is_leaf:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg
            else:
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg


def check_gradient(f, x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
    Rejects a non-deterministic f (two forward evaluations must agree bitwise).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    with no_grad():
        y1 = f(Tensor(x.data.copy()))
        y2 = f(Tensor(x.data.copy()))
    if not np.array_equal(y1.data, y2.data):
        raise ValueError("f is not deterministic: two evaluations differ")

    xt = Tensor(x.data.copy(), requires_grad=True)
    out = f(xt)
    out.backward(params=[xt])
    analytic = xt.grad.ravel()

    flat = x.data.ravel()
    numeric = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            bump = flat.copy()
            bump[i] = flat[i] + h
            hi = f(Tensor(bump.reshape(x.shape))).item()
            bump[i] = flat[i] - h
            lo = f(Tensor(bump.reshape(x.shape))).item()
            numeric[i] = (hi - lo) / (2.0 * h)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


class Adam:
    """Adaptive-moment optimizer with bias correction (b1=0.9, b2=0.999)."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"grad shape {g.shape} != param shape {p.data.shape} for {k}")
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
