"""Small deterministic tensor library with reverse-mode differentiation.

Everything is backed by numpy arrays in row-major order. The graph is built
eagerly: every op returns a :class:`Tensor` that remembers its parents and a
closure computing the vector-Jacobian product. :func:`backward` walks the
graph in reverse topological order.

Two context managers shape behaviour without global mutable state:

* :func:`no_grad` disables graph construction (inference).
* :func:`count_macs` installs a counter that ops with multiply-accumulate
  work (matmul, conv) and the normalising ops (softmax, layer-norm) report
  into. The FLOPS accounting module uses it as an independent oracle.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_dtype_var: contextvars.ContextVar = contextvars.ContextVar("adamtl_dtype", default=np.float32)
_grad_var: contextvars.ContextVar = contextvars.ContextVar("adamtl_grad", default=True)
_macs_var: contextvars.ContextVar = contextvars.ContextVar("adamtl_macs", default=None)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


def default_dtype():
    return _dtype_var.get()


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the float type used for new tensors (tests use float64)."""
    token = _dtype_var.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype_var.reset(token)


@contextlib.contextmanager
def no_grad():
    token = _grad_var.set(False)
    try:
        yield
    finally:
        _grad_var.reset(token)


def grad_enabled() -> bool:
    return _grad_var.get()


@dataclass
class MacCounter:
    """Tally of multiply-accumulates (and normalisation element costs) by op kind."""

    by_op: dict = field(default_factory=dict)

    def add(self, op: str, n: int) -> None:
        self.by_op[op] = self.by_op.get(op, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.by_op.values())


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    token = _macs_var.set(counter)
    try:
        yield counter
    finally:
        _macs_var.reset(token)


def _tally(op: str, n: int) -> None:
    counter = _macs_var.get()
    if counter is not None:
        counter.add(op, n)


class Tensor:
    """n-d float array participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None,
                 op: str = "", name: str = ""):
        arr = np.asarray(data)
        if arr.dtype != default_dtype() and not _parents:
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.name = name
        if self.requires_grad and not _parents:
            self.grad = np.zeros_like(self.data)

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, p): return power(self, p)

    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)
    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    track = grad_enabled() and any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, True, _parents=tuple(parents), _backward=backward, op=op)
    out = Tensor(data, False, _parents=(), op=op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)
    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1),)
    return _make(out, (a,), bw, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)
    return _make(out, (a,), bw, "gelu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed stably."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is 1 strictly inside and 0 elsewhere."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard`` exactly; gradient routed to ``soft`` unchanged."""
    hard = np.asarray(hard, dtype=soft.data.dtype)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: shape mismatch {hard.shape} vs {soft.shape}")
    return _make(hard, (soft,), lambda g: (g,), "straight_through")


# -- reductions and shape ops ------------------------------------------------

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    axes = range(a.ndim) if axis is None else ((axis,) if isinstance(axis, int) else axis)
    n = int(np.prod([a.shape[i] for i in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)
    return _make(np.asarray(out, dtype=a.data.dtype), (a,), bw, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} do not conform") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(out, ts, bw, "concat")


def take(a, indices, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = idx
        np.add.at(full, tuple(sl), g)
        return (full,)
    return _make(np.take(a.data, idx, axis=axis), (a,), bw, "take")


def scatter(base, indices, values, axis: int = 0) -> Tensor:
    """Copy of ``base`` with the slices ``indices`` along ``axis`` replaced by ``values``."""
    base, values = as_tensor(base), as_tensor(values)
    idx = np.asarray(indices, dtype=np.int64)
    sl = [slice(None)] * base.ndim
    sl[axis] = idx
    sl = tuple(sl)
    out = base.data.copy()
    out[sl] = values.data

    def bw(g):
        gb = g.copy()
        gb[sl] = 0
        return gb, g[sl]
    return _make(out, (base, values), bw, "scatter")


def upsample_nearest(a, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    a = as_tensor(a)
    if factor == 1:
        return a
    out = a.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def bw(g):
        s = g.shape
        g = g.reshape(*s[:-2], s[-2] // factor, factor, s[-1] // factor, factor)
        return (g.sum(axis=(-3, -1)),)
    return _make(out, (a,), bw, "upsample")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}") from None
    _tally("matmul", out.size * a.shape[-1])

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight stored [in, out]."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- normalisation -----------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    _tally("softmax", out.size)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)
    return _make(out, (a,), bw, "log_softmax")


def layer_norm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: shape mismatch {x.shape} vs {weight.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data
    _tally("layer_norm", x.data.size)
    n = x.shape[-1]

    def bw(g):
        gw = _unbroadcast(g * xhat, weight.shape)
        gb = _unbroadcast(g, bias.shape)
        gxhat = g * weight.data
        gx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, gw, gb
    return _make(out, (x, weight, bias), bw, "layer_norm")


# -- convolution -------------------------------------------------------------

def _pad(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return np.pad(x, width, mode="wrap" if mode == "wrap" else "constant")


def _unpad_grad(gp: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return gp
    if mode == "wrap":
        gp = gp.copy()
        for ax in (-2, -1):
            n = gp.shape[ax] - 2 * p
            head = np.take(gp, range(0, p), axis=ax)
            tail = np.take(gp, range(n + p, n + 2 * p), axis=ax)
            core = np.take(gp, range(p, n + p), axis=ax)
            idx_tail = [slice(None)] * gp.ndim
            idx_tail[ax] = slice(n - p, n)
            core[tuple(idx_tail)] += head
            idx_head = [slice(None)] * gp.ndim
            idx_head[ax] = slice(0, p)
            core[tuple(idx_head)] += tail
            gp = core
        return gp
    return gp[..., p:-p, p:-p]


def conv2d(x, weight, bias=None, padding_mode: str = "zeros") -> Tensor:
    """Stride-1 'same' convolution. x [B,C,H,W], weight [O,C,k,k] with odd k."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1] or weight.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {weight.shape}")
    B, C, H, W = x.shape
    O, _, k, _ = weight.shape
    p = k // 2
    xp = _pad(x.data, p, padding_mode)
    # cols: [B, H, W, C, k, k]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * k * k)
    wmat = weight.data.reshape(O, C * k * k)
    out = (cols @ wmat.T).reshape(B, H, W, O).transpose(0, 3, 1, 2)
    _tally("conv2d", B * H * W * O * C * k * k)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, O, 1, 1)
        parents.append(bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * H * W, O)
        gw = (g2.T @ cols).reshape(weight.shape)
        gcols = (g2 @ wmat).reshape(B, H, W, C, k, k)
        gp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gp[:, :, i:i + H, j:j + W] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grads = [_unpad_grad(gp, p, padding_mode), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)
    return _make(np.ascontiguousarray(out), parents, bw, "conv2d")


# -- backward ----------------------------------------------------------------

def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable requires_grad tensor."""
    if loss.shape != ():
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents:
            node.grad = g if node.grad is None else node.grad + g
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        else:
            node.grad = g.astype(node.data.dtype, copy=False) if node.grad is None else node.grad + g


# -- randomness --------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


class RngState:
    """Counter-based generator: output i is SplitMix64(key + (position+i+1)*golden).

    The key is the SplitMix64 finaliser of the seed. Uniforms take the top 53
    bits and are centred in their bucket, so they lie strictly inside (0, 1).
    """

    def __init__(self, seed: int, position: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.position = int(position)
        self._key = _splitmix(np.array([self.seed], dtype=np.uint64))[0]

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, position={self.position})"

    def bits(self, n: int) -> np.ndarray:
        ctr = np.arange(self.position + 1, self.position + n + 1, dtype=np.uint64)
        self.position += n
        with np.errstate(over="ignore"):
            return _splitmix(self._key + ctr * _GOLDEN)

    def uniform(self, shape) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape)) if shape else 1
        z = self.bits(n)
        return (((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53).reshape(shape)

    def normal(self, shape) -> np.ndarray:
        """Box-Muller standard normals."""
        shape = tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = self.uniform((2, (n + 1) // 2))
        r = np.sqrt(-2.0 * np.log(u[0]))
        z = np.concatenate([r * np.cos(2 * np.pi * u[1]), r * np.sin(2 * np.pi * u[1])])
        return z[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")

    def spawn(self, label: str) -> "RngState":
        """Independent stream derived from this seed and a label (position-independent)."""
        tag = np.uint64(zlib.crc32(label.encode()))
        with np.errstate(over="ignore"):
            child = _splitmix(np.array([np.uint64(self.seed) ^ (tag * _GOLDEN)], dtype=np.uint64))[0]
        return RngState(int(child))


def gumbel_noise(rng: RngState, shape, u: np.ndarray | None = None) -> Tensor:
    """Standard Gumbel samples ``-log(-log(u))``; ``u`` may be forced for testing."""
    if u is None:
        u = rng.uniform(tuple(shape))
    return Tensor(-np.log(-np.log(np.asarray(u, dtype=np.float64))))


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. the array ``x`` (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]
