"""Dense tensors with reverse-mode automatic differentiation.

Tensors carry no batch axis; volumes are ``[C, D, H, W]``. Every operation
that receives an input with ``requires_grad`` records a node holding a
backward closure. Node sequence numbers are assigned in creation order, so
:func:`backward` visits the reachable nodes in exact reverse append order.
"""
from __future__ import annotations

import contextlib
import itertools
import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import ShapeError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_precision = os.environ.get("LACT_PRECISION", "f64")
if _precision not in _DTYPES:
    raise ValueError(f"LACT_PRECISION must be one of {sorted(_DTYPES)}, got {_precision!r}")

_DEBUG = os.environ.get("LACT_DEBUG", "") not in ("", "0")
_seq = itertools.count()
_state = threading.local()


def set_precision(name: str) -> None:
    """Switch the global floating point precision (``"f32"`` or ``"f64"``)."""
    global _precision
    if name not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    _precision = name


def get_precision() -> str:
    return _precision


def get_dtype():
    return _DTYPES[_precision]


@contextlib.contextmanager
def precision(name: str):
    old = _precision
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    old = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = old


class _Node:
    __slots__ = ("seq", "op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.seq = next(_seq)
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    """An n-dimensional array that can take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_dtype()), requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=get_dtype()), requires_grad)


def flatten(t: Tensor) -> np.ndarray:
    """Row-major values as a 1-D array."""
    return t.data.reshape(-1).copy()


def unflatten(values, shape) -> Tensor:
    values = np.asarray(values)
    if values.size != int(np.prod(shape)):
        raise ShapeError(f"{values.size} values cannot fill shape {tuple(shape)}")
    return Tensor(values.reshape(shape))


def make_op(op: str, out: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], Sequence]) -> Tensor:
    """Wrap ``out`` in a Tensor and record a graph node when needed.

    ``backward`` maps the output gradient to one gradient (or None) per
    parent, in order.
    """
    if _DEBUG and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op} produced non-finite values")
    t = Tensor(out, dtype=out.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._node = _Node(op, tuple(parents), backward)
    return t


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The graph is consumed: intermediate tensors are detached afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
        return

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(node.parents)
    order = sorted(nodes.values(), key=lambda t: t._node.seq, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(id(t), None)
        node = t._node
        t._node = None
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                _accumulate(parent, pg)
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=leaf.data.dtype, copy=True)
    else:
        leaf.grad += g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make_op("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return make_op("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return make_op("relu", np.where(pos, a.data, 0.0).astype(a.data.dtype), (a,),
                   lambda g: (np.where(pos, g, 0.0).astype(g.dtype),))


_BINARY = {"add": add, "sub": sub, "mul": mul}
_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if kind in _BINARY:
        if b is None:
            raise ShapeError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ShapeError(f"{kind} takes a single operand")
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return make_op("sum", np.asarray(a.data.sum()), (a,),
                   lambda g: (np.full(shape, g, dtype=a.data.dtype),))


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    spatial = tensors[0].shape[1:]
    for t in tensors:
        if t.shape[1:] != spatial:
            raise ShapeError(f"concat_channels: spatial mismatch {t.shape[1:]} vs {spatial}")
    if len(tensors) == 1:
        return tensors[0]
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])

    def _back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return make_op("concat", np.concatenate([t.data for t in tensors], axis=0), tensors, _back)


def _repeat3(x: np.ndarray, f: int) -> np.ndarray:
    c, d, h, w = x.shape
    out = np.broadcast_to(x[:, :, None, :, None, :, None], (c, d, f, h, f, w, f))
    return out.reshape(c, d * f, h * f, w * f)


def upsample3d_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    c, d, h, w = x.shape
    f = factor

    def _back(g):
        return (g.reshape(c, d, f, h, f, w, f).sum(axis=(2, 4, 6)),)

    return make_op("upsample", _repeat3(x.data, f), (x,), _back)


def avgpool3d(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"pool factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    c, d, h, w = x.shape
    f = factor
    if d % f or h % f or w % f:
        raise ShapeError(f"avgpool3d: spatial shape {(d, h, w)} not divisible by {f}")
    out = x.data.reshape(c, d // f, f, h // f, f, w // f, f).mean(axis=(2, 4, 6))
    scale = 1.0 / f ** 3

    return make_op("avgpool", out, (x,), lambda g: (_repeat3(g * scale, f),))


# ---------------------------------------------------------------------------
# convolution and normalization
# ---------------------------------------------------------------------------

def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation of ``x[C_in, D, H, W]`` with ``kernel[C_out, C_in, k, k, k]``."""
    if x.data.ndim != 4 or kernel.data.ndim != 5:
        raise ShapeError(f"conv3d expects input [C,D,H,W] and kernel [Co,Ci,k,k,k], "
                         f"got {x.shape} and {kernel.shape}")
    c_in, d, h, w = x.shape
    c_out, kc, k, k2, k3 = kernel.shape
    if kc != c_in:
        raise ShapeError(f"conv3d: input channels {c_in} (input {x.shape}) do not match "
                         f"kernel C_in {kc} (kernel {kernel.shape})")
    if not (k == k2 == k3) or k % 2 == 0:
        raise ShapeError(f"conv3d: kernel must be cubic with odd size, got {kernel.shape[2:]}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv3d: bad stride {stride} / padding {padding}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({c_out},)")
    out_shape = []
    for n in (d, h, w):
        span = n + 2 * padding - k
        if span < 0 or span % stride:
            raise ShapeError(f"conv3d: non-integral or empty output size for extent {n}, "
                             f"k={k}, stride={stride}, padding={padding}")
        out_shape.append(span // stride + 1)
    do, ho, wo = out_shape

    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p))) if p else x.data
    pointwise = k == 1 and stride == 1
    if pointwise:
        cols = xp.reshape(c_in, -1)
    else:
        cols = _kernels.im2col(xp, k, stride, out_shape)
    kmat = kernel.data.reshape(c_out, -1)
    out = kmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(c_out, do, ho, wo)
    padded_shape = xp.shape

    def _back(g):
        g2 = g.reshape(c_out, -1)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = kmat.T @ g2
            if pointwise:
                gxp = gcols.reshape(padded_shape)
            else:
                gxp = _kernels.col2im(gcols, padded_shape, k, stride, out_shape)
            gx = gxp[:, p:p + d, p:p + h, p:p + w] if p else gxp
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    parents = (x, kernel, bias if bias is not None else Tensor(np.zeros(c_out)))
    return make_op("conv3d", out, parents, _back)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the spatial voxels, then affine scale/shift."""
    if eps <= 0:
        raise ValueError(f"instance_norm: eps must be > 0, got {eps}")
    if x.data.ndim != 4:
        raise ShapeError(f"instance_norm expects [C,D,H,W], got {x.shape}")
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm: gamma/beta {gamma.shape}/{beta.shape} vs channels {c}")
    xd = x.data
    n = xd[0].size
    mean = xd.mean(axis=(1, 2, 3), keepdims=True)
    cent = xd - mean
    var = (cent * cent).mean(axis=(1, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = cent * inv
    gd = gamma.data[:, None, None, None]
    out = gd * xhat + beta.data[:, None, None, None]

    def _back(g):
        gsum = g.sum(axis=(1, 2, 3), keepdims=True)
        gxs = (g * xhat).sum(axis=(1, 2, 3), keepdims=True)
        gx = (gd * inv / n) * (n * g - gsum - xhat * gxs)
        return gx, gxs.reshape(c), gsum.reshape(c)

    return make_op("instance_norm", out, (x, gamma, beta), _back)


# ---------------------------------------------------------------------------
# verification harness
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
                      max_coords: int | None = None, rng=None, corrupt: float = 0.0) -> float:
    """Largest relative error between autodiff and central-difference gradients.

    ``f`` rebuilds a scalar Tensor from ``params`` on each call. When
    ``max_coords`` is given, that many coordinates per parameter are sampled
    with ``rng`` instead of checking all of them. ``corrupt`` is added to every
    autodiff gradient and exists only to self-test the harness.
    """
    if eps <= 0:
        raise ValueError(f"finite_diff_check: eps must be > 0, got {eps}")
    params = list(params)
    for p in params:
        p.grad = None
    backward(f())
    ad_grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    worst = 0.0
    with no_grad():
        for p, ad in zip(params, ad_grads):
            flat = p.data.reshape(-1)
            adf = ad.reshape(-1) + corrupt
            coords = range(flat.size)
            if max_coords is not None and flat.size > max_coords:
                rng = rng if rng is not None else np.random.default_rng(0)
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().data.item()
                flat[i] = orig - eps
                fm = f().data.item()
                flat[i] = orig
                fd = (fp - fm) / (2.0 * eps)
                a = float(adf[i])
                err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
                worst = max(worst, err)
    return worst
