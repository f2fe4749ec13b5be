"""Parameterized building blocks: convolutions, residual blocks, convGRU cells."""
from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .errors import ShapeError
from .tensor import (Tensor, add, conv3d, get_dtype, instance_norm, mul, relu, sigmoid,
                     sub, tanh, zeros)

NORM_EPS = 1e-5


def he_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_dtype())


class Layer:
    """Base class; subclasses list their parameters and sub-layers in ``_fields``."""

    _fields: Sequence[str] = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in self._fields:
            obj = getattr(self, name)
            if obj is None:
                continue
            full = f"{prefix}{name}"
            if isinstance(obj, Tensor):
                yield full, obj
            else:
                yield from obj.named_parameters(full + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv3dLayer(Layer):
    _fields = ("kernel", "bias")

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1,
                 padding: int | None = None, rng: np.random.Generator | None = None,
                 use_bias: bool = True):
        if k % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {k}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.kernel = Tensor(he_uniform(rng, (c_out, c_in, k, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if use_bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.kernel, self.bias, self.stride, self.padding)


class InstanceNorm(Layer):
    _fields = ("gamma", "beta")

    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return instance_norm(x, self.gamma, self.beta, NORM_EPS)


class ResBlock(Layer):
    """Pre-activation residual block: (norm, relu, conv) twice plus a skip path.

    The skip is the identity when channel counts agree and a 1x1x1
    convolution otherwise. ``conv1`` has no bias: the instance norm that
    follows it would cancel one exactly.
    """

    _fields = ("norm1", "conv1", "norm2", "conv2", "projection")

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.c_in, self.c_out = c_in, c_out
        self.norm1 = InstanceNorm(c_in)
        self.conv1 = Conv3dLayer(c_in, c_out, 3, rng=rng, use_bias=False)
        self.norm2 = InstanceNorm(c_out)
        self.conv2 = Conv3dLayer(c_out, c_out, 3, rng=rng)
        self.projection = Conv3dLayer(c_in, c_out, 1, rng=rng) if c_in != c_out else None

    def __call__(self, x: Tensor) -> Tensor:
        if min(x.shape[1:]) < 3:
            raise ShapeError(f"ResBlock needs spatial dims >= 3, got {x.shape[1:]}")
        y = self.conv1(relu(self.norm1(x)))
        y = self.conv2(relu(self.norm2(y)))
        skip = x if self.projection is None else self.projection(x)
        return add(skip, y)


def res_block_forward(block: ResBlock, x: Tensor) -> Tensor:
    return block(x)


class ConvGRUCell(Layer):
    """Convolutional GRU with 3x3x3 gate convolutions.

    ``z = sig(Wz*x + Uz*h + bz)``, ``r = sig(Wr*x + Ur*h + br)``,
    ``c = tanh(Wh*x + Uh*(r.h) + bh)``, ``h' = (1-z).h + z.c``.
    """

    _fields = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")

    def __init__(self, c_x: int, c_h: int, rng: np.random.Generator):
        self.c_x, self.c_h = c_x, c_h
        for gate in ("z", "r", "h"):
            setattr(self, f"w_{gate}", Tensor(he_uniform(rng, (c_h, c_x, 3, 3, 3)), requires_grad=True))
            setattr(self, f"u_{gate}", Tensor(he_uniform(rng, (c_h, c_h, 3, 3, 3)), requires_grad=True))
            setattr(self, f"b_{gate}", Tensor(np.zeros(c_h), requires_grad=True))

    def initial_state(self, spatial) -> Tensor:
        return zeros((self.c_h, *spatial))

    def step(self, h_prev: Tensor, x_t: Tensor) -> Tensor:
        if x_t.data.ndim != 4 or x_t.shape[0] != self.c_x:
            raise ShapeError(f"convGRU: input {x_t.shape} does not have {self.c_x} channels")
        if h_prev.shape != (self.c_h, *x_t.shape[1:]):
            raise ShapeError(f"convGRU: hidden state {h_prev.shape} incompatible with input "
                             f"{x_t.shape} and {self.c_h} hidden channels")
        # a constant all-zero state contributes nothing through the U kernels
        h_is_zero = not h_prev.requires_grad and not h_prev.data.any()

        def gate(w, u, b, h):
            pre = conv3d(x_t, w, b, 1, 1)
            if h_is_zero:
                return pre
            return add(pre, conv3d(h, u, None, 1, 1))

        z = sigmoid(gate(self.w_z, self.u_z, self.b_z, h_prev))
        if h_is_zero:
            cand = tanh(conv3d(x_t, self.w_h, self.b_h, 1, 1))
            return mul(z, cand)
        r = sigmoid(gate(self.w_r, self.u_r, self.b_r, h_prev))
        cand = tanh(gate(self.w_h, self.u_h, self.b_h, mul(r, h_prev)))
        return add(h_prev, mul(z, sub(cand, h_prev)))

    def aggregate(self, xs: Sequence[Tensor], h0: Tensor | None = None) -> Tensor:
        xs = list(xs)
        if not xs:
            raise ShapeError("convGRU aggregation needs at least one time point")
        h = self.initial_state(xs[0].shape[1:]) if h0 is None else h0
        for x_t in xs:
            h = self.step(h, x_t)
        return h


def convgru_step(cell: ConvGRUCell, h_prev: Tensor, x_t: Tensor) -> Tensor:
    return cell.step(h_prev, x_t)


def convgru_aggregate(cell: ConvGRUCell, xs: Sequence[Tensor], h0: Tensor | None = None) -> Tensor:
    return cell.aggregate(xs, h0)


__all__ = ["Layer", "Conv3dLayer", "InstanceNorm", "ResBlock", "ConvGRUCell",
           "res_block_forward", "convgru_step", "convgru_aggregate", "he_uniform"]
