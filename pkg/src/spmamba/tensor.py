"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent.  Calling
:func:`backward` on a scalar walks the graph in reverse topological order
and accumulates gradients with ``+=`` on fan-out.

The heavy primitives (convolution, pooling, batch norm, softmax, layer norm)
are fused: each is a single node with a hand-written backward, so a network
forward pass stays at a few hundred nodes.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigError, DimensionError, NumericalError, StateError, UsageError

_CHECKED = contextvars.ContextVar("spmamba_checked", default=True)
_FAULTS: contextvars.ContextVar[frozenset] = contextvars.ContextVar("spmamba_faults", default=frozenset())


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Toggle the NaN/Inf scan performed at every op boundary."""
    token = _CHECKED.set(enabled)
    try:
        yield
    finally:
        _CHECKED.reset(token)


def is_checked() -> bool:
    return _CHECKED.get()


@contextlib.contextmanager
def inject_faults(names: Iterable[str]):
    """Scale the backward pass of the named fault points by 2 (verification only)."""
    token = _FAULTS.set(frozenset(names))
    try:
        yield
    finally:
        _FAULTS.reset(token)


class Tensor:
    """An immutable float64 array that can take part in autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def backward(self) -> "Tape":
        return backward(self)

    # -- operator sugar ---------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if _CHECKED.get() and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite value produced by {op}")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Tape / backward
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Topologically ordered record of the graph reachable from a root."""

    nodes: list[Tensor] = field(default_factory=list)
    gradients: dict[int, np.ndarray] = field(default_factory=dict)

    def grad(self, t: Tensor) -> np.ndarray | None:
        return self.gradients.get(id(t))


def build_tape(root: Tensor) -> Tape:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return Tape(nodes=order)


def backward(root: Tensor) -> Tape:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``root``."""
    if root.data.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    tape = build_tape(root)
    grads = tape.gradients
    grads[id(root)] = np.ones_like(root.data)
    for node in reversed(tape.nodes):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != p.shape:
                pg = _unbroadcast(pg, p.shape)
            prev = grads.get(id(p))
            grads[id(p)] = pg.copy() if prev is None else prev + pg
    for node in tape.nodes:
        if node._backward is None and node.requires_grad:
            g = grads.get(id(node), np.zeros_like(node.data))
            node.grad = g if node.grad is None else node.grad + g
    return tape


# ---------------------------------------------------------------------------
# Elementwise arithmetic (numpy broadcasting; bias-add and scalar cases)
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _node(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    return _node(out, (a, b), lambda g: (g * pick_a, g * ~pick_a), "minimum")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)
    return _node(out, (a, b), lambda g: (g * pick_a, g * ~pick_a), "maximum")


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def flip(a: Tensor, axis: int) -> Tensor:
    return _node(np.flip(a.data, axis), (a,), lambda g: (np.flip(g, axis),), "flip")


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int)) or p is None or p is Ellipsis for p in parts)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _node(np.asarray(a.data[idx]), (a,), bw, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if len(xs) == 1:
        return xs[0]
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != axis % len(ref)):
            raise DimensionError(f"cannot concat shapes {xs[0].shape} and {x.shape} on axis {axis}")
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _node(np.concatenate([x.data for x in xs], axis=axis), xs, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to extent {a.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + s)
        out.append(getitem(a, tuple(sl)))
        start += s
    return out


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Channel concatenation of NCHW tensors."""
    for x in xs:
        if x.ndim != 4:
            raise DimensionError(f"expected NCHW, got {x.shape}")
    return concat(xs, axis=1)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if x.ndim != 4:
        raise DimensionError(f"expected NCHW, got {x.shape}")
    return split(x, sizes, axis=1)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _node(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x wᵀ + b`` over the last axis of ``x``."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input features {x.shape[-1]} != weight in-features {w.shape[1]}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ wd
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, bw, "linear")


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def _sigmoid_np(t: np.ndarray) -> np.ndarray:
    return expit(t)


def _softplus_np(t: np.ndarray) -> np.ndarray:
    return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid_np(xd)
    return _node(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),), "silu")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return _node(_softplus_np(xd), (x,), lambda g: (g * _sigmoid_np(xd),), "softplus")


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "silu": silu, "softplus": softplus}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}") from None


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), bw, "softmax")


def bce_with_logits(z: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits, overflow-safe."""
    zd = z.data
    y = np.asarray(target, dtype=np.float64)
    out = np.maximum(zd, 0.0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    return _node(out, (z,), lambda g: (g * (_sigmoid_np(zd) - y),), "bce")


# ---------------------------------------------------------------------------
# Convolution and pooling (NCHW)
# ---------------------------------------------------------------------------

def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation (no kernel flip) with optional grouping."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input and OIkk weight, got {x.shape}, {w.shape}")
    if stride < 1 or pad < 0:
        raise ConfigError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    n, cin, h, wd_ = x.shape
    cout, cg, kh, kw = w.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(f"groups={groups} must divide in-channels {cin} and out-channels {cout}")
    if cg != cin // groups:
        raise DimensionError(f"weight expects {cg} channels per group, input gives {cin // groups}")
    if kh > h + 2 * pad or kw > wd_ + 2 * pad:
        raise DimensionError(f"kernel {kh}x{kw} does not fit padded input {h + 2 * pad}x{wd_ + 2 * pad}")
    ho, wo = _out_size(h, kh, stride, pad), _out_size(wd_, kw, stride, pad)
    og = cout // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if groups == cin == cout:
        return _depthwise(x, w, b, xp, stride, pad, ho, wo)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # cols: (N, g, Ho*Wo, cg*kh*kw)
    cols = win.reshape(n, groups, cg, ho, wo, kh, kw).transpose(0, 1, 3, 4, 2, 5, 6).reshape(n, groups, ho * wo, cg * kh * kw)
    wmat = w.data.reshape(groups, og, cg * kh * kw).transpose(0, 2, 1)  # (g, K, og)
    out = np.matmul(cols, wmat)  # (N, g, HW, og)
    out = out.transpose(0, 1, 3, 2).reshape(n, cout, ho, wo)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)

    def bw(g):
        gm = g.reshape(n, groups, og, ho * wo).transpose(0, 1, 3, 2)  # (N, g, HW, og)
        gw = np.matmul(cols.transpose(1, 3, 0, 2).reshape(groups, cg * kh * kw, n * ho * wo),
                       gm.transpose(1, 0, 2, 3).reshape(groups, n * ho * wo, og))
        gw = gw.transpose(0, 2, 1).reshape(cout, cg, kh, kw)
        gcols = np.matmul(gm, wmat.transpose(0, 2, 1))  # (N, g, HW, K)
        gcols = gcols.reshape(n, groups, ho, wo, cg, kh, kw).transpose(0, 1, 4, 5, 6, 2, 3).reshape(n, cin, kh, kw, ho, wo)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, pad:pad + h, pad:pad + wd_] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, bw, "conv2d")


def _depthwise(x, w, b, xp, stride, pad, ho, wo):
    # one filter per channel: accumulate shifted slices instead of building columns
    n, c, h, wd_ = x.shape
    kh, kw = w.shape[2:]
    wk = w.data[:, 0]
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    def tap(i, j):
        return xp[:, :, i:i + span_h:stride, j:j + span_w:stride]

    out = np.zeros((n, c, ho, wo))
    for i in range(kh):
        for j in range(kw):
            out += tap(i, j) * wk[:, i, j].reshape(1, c, 1, 1)
    if b is not None:
        out += b.data.reshape(1, c, 1, 1)

    def bw(g):
        gxp = np.zeros(xp.shape)
        gw = np.empty((c, 1, kh, kw))
        for i in range(kh):
            for j in range(kw):
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, tap(i, j))
                gxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += g * wk[:, i, j].reshape(1, c, 1, 1)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd_] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, bw, "conv2d")


def maxpool2d(x: Tensor, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Max pooling; padding never wins, ties route gradient to the first row-major cell."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects NCHW, got {x.shape}")
    if k < 1 or stride < 1 or pad < 0:
        raise ConfigError(f"invalid pooling parameters k={k}, stride={stride}, pad={pad}")
    n, c, h, w = x.shape
    if k > h + 2 * pad or k > w + 2 * pad:
        raise DimensionError(f"window {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo].reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gxp = np.zeros(xp.shape)
        di, dj = np.divmod(arg, k)
        rows = np.arange(ho).reshape(1, 1, ho, 1) * stride + di
        cols = np.arange(wo).reshape(1, 1, 1, wo) * stride + dj
        nn_ = np.arange(n).reshape(n, 1, 1, 1)
        cc = np.arange(c).reshape(1, c, 1, 1)
        np.add.at(gxp, (np.broadcast_to(nn_, g.shape), np.broadcast_to(cc, g.shape), rows, cols), g)
        return (gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp,)

    return _node(out, (x,), bw, "maxpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW, got {x.shape}")
    return mean(x, axis=(2, 3), keepdims=True)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return _node(out, (x,), lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),), "upsample")


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------

@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    initialized: bool = True


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, mode: str = "train",
                running_stats: RunningStats | None = None) -> Tensor:
    """Per-channel batch normalisation with population variance in train mode."""
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects NCHW, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"affine params must have shape ({c},)")
    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if running_stats is not None:
            m = running_stats.momentum
            running_stats.mean[...] = (1 - m) * running_stats.mean + m * mu
            running_stats.var[...] = (1 - m) * running_stats.var + m * var
            running_stats.initialized = True
    elif mode == "eval":
        if running_stats is None or not running_stats.initialized:
            raise StateError("eval-mode batchnorm needs initialised running statistics")
        mu, var = running_stats.mean, running_stats.var
    else:
        raise ConfigError(f"unknown batchnorm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    gd = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)
    m_count = x.shape[0] * x.shape[2] * x.shape[3]

    def bw(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gd
        if mode == "train":
            gx = (inv.reshape(1, c, 1, 1) / m_count) * (
                m_count * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(1, c, 1, 1)
        return gx, ggamma, gbeta

    return _node(out, (x, gamma, beta), bw, "batchnorm2d")


def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each (n, h, w) position over the channel axis of an NCHW tensor."""
    c = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gd = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        gxhat = g * gd
        gx = (inv / c) * (c * gxhat - gxhat.sum(axis=1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _node(out, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------------------
# Verification hook
# ---------------------------------------------------------------------------

def fault_point(x: Tensor, name: str) -> Tensor:
    """Identity, unless ``name`` is listed by :func:`inject_faults` (then backward is doubled)."""
    if name not in _FAULTS.get():
        return x
    return _node(x.data, (x,), lambda g: (2.0 * g,), f"fault[{name}]")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

MAGIC = b"SPMB"
FORMAT_VERSION = 1


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    head = MAGIC + np.array([FORMAT_VERSION, arr.ndim], dtype="<u4").tobytes()
    head += np.array(arr.shape, dtype="<u8").tobytes()
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor record; returns the array and the offset just past it."""
    if buf[offset:offset + 4] != MAGIC:
        raise ValueError("bad tensor magic")
    version, rank = np.frombuffer(buf, dtype="<u4", count=2, offset=offset + 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    pos = offset + 12
    shape = tuple(int(s) for s in np.frombuffer(buf, dtype="<u8", count=rank, offset=pos))
    pos += 8 * int(rank)
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
    return data, pos + 8 * count
