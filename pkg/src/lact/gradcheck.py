"""Finite-difference audit of every differentiable component."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .layers import ConvGRUCell, ResBlock
from .model import ModelConfig, build
from .pipeline import soft_dice_bce_loss
from .tensor import (Tensor, avgpool3d, concat_channels, conv3d, elementwise, finite_diff_check,
                     instance_norm, mul, precision, tensor_sum, upsample3d_nearest)

LAYER_TOL = 1e-6
MODEL_TOL = 1e-4
FD_EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _t(rng, *shape, grad=True, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=grad)


def _projected(out: Tensor, weights: np.ndarray) -> Tensor:
    # a random linear functional exercises every output coordinate differently
    return tensor_sum(mul(out, Tensor(weights)))


def _cases(rng) -> list[tuple[str, float, Callable[[], Tensor], list[Tensor]]]:
    cases = []

    x, k, b = _t(rng, 2, 5, 5, 5), _t(rng, 3, 2, 3, 3, 3), _t(rng, 3)
    w = rng.normal(size=(3, 5, 5, 5))
    cases.append(("conv3d", LAYER_TOL, lambda: _projected(conv3d(x, k, b, 1, 1), w), [x, k, b]))

    xs, ks, bs = _t(rng, 2, 5, 5, 5), _t(rng, 2, 2, 3, 3, 3), _t(rng, 2)
    ws = rng.normal(size=(2, 2, 2, 2))
    cases.append(("conv3d_stride2", LAYER_TOL, lambda: _projected(conv3d(xs, ks, bs, 2, 0), ws),
                  [xs, ks, bs]))

    xn, g, be = _t(rng, 2, 4, 4, 4), _t(rng, 2), _t(rng, 2)
    wn = rng.normal(size=(2, 4, 4, 4))
    cases.append(("instance_norm", LAYER_TOL,
                  lambda: _projected(instance_norm(xn, g, be, 1e-5), wn), [xn, g, be]))

    a, c = _t(rng, 2, 3, 3, 3), _t(rng, 2, 3, 3, 3)
    we = rng.normal(size=(2, 3, 3, 3))
    for kind in ("add", "sub", "mul"):
        cases.append((f"elementwise_{kind}", LAYER_TOL,
                      lambda kind=kind: _projected(elementwise(kind, a, c), we), [a, c]))
    for kind in ("sigmoid", "tanh", "relu"):
        cases.append((f"elementwise_{kind}", LAYER_TOL,
                      lambda kind=kind: _projected(elementwise(kind, a), we), [a]))

    p, q = _t(rng, 2, 2, 2, 2), _t(rng, 3, 2, 2, 2)
    wc = rng.normal(size=(5, 2, 2, 2))
    cases.append(("concat_channels", LAYER_TOL, lambda: _projected(concat_channels([p, q]), wc), [p, q]))
    u = _t(rng, 2, 2, 2, 2)
    wu = rng.normal(size=(2, 4, 4, 4))
    cases.append(("upsample3d_nearest", LAYER_TOL, lambda: _projected(upsample3d_nearest(u, 2), wu), [u]))
    v = _t(rng, 2, 4, 4, 4)
    wv = rng.normal(size=(2, 2, 2, 2))
    cases.append(("avgpool3d", LAYER_TOL, lambda: _projected(avgpool3d(v, 2), wv), [v]))

    cell = ConvGRUCell(2, 3, np.random.default_rng(rng.integers(1 << 31)))
    for prm in cell.parameters():
        prm.data += rng.normal(scale=0.1, size=prm.shape)
    h_prev = Tensor(np.tanh(rng.normal(size=(3, 4, 4, 4))), requires_grad=True)
    x_t = _t(rng, 2, 4, 4, 4)
    wg = rng.normal(size=(3, 4, 4, 4))
    cases.append(("convgru_step", LAYER_TOL, lambda: _projected(cell.step(h_prev, x_t), wg),
                  [h_prev, x_t] + cell.parameters()))

    block = ResBlock(2, 3, np.random.default_rng(rng.integers(1 << 31)))
    for prm in block.parameters():
        prm.data += rng.normal(scale=0.1, size=prm.shape)
    xr = _t(rng, 2, 4, 4, 4)
    wr = rng.normal(size=(3, 4, 4, 4))
    cases.append(("res_block", LAYER_TOL, lambda: _projected(block(xr), wr), [xr] + block.parameters()))

    pred = Tensor(rng.uniform(0.05, 0.95, size=(4, 4, 4)), requires_grad=True)
    target = (rng.random((4, 4, 4)) < 0.3).astype(float)
    cases.append(("soft_dice_bce_loss", LAYER_TOL, lambda: soft_dice_bce_loss(pred, target), [pred]))

    for agg in ("convgru", "concat"):
        cfg = ModelConfig(levels=2, base_channels=2, aggregation=agg,
                          concat_T=3 if agg == "concat" else None, seed=int(rng.integers(1000)))
        model = build(cfg)
        for prm in model.parameters():
            # move biases/affines off their init values so their gradients are generic
            prm.data += rng.normal(scale=0.05, size=prm.shape)
        series = rng.normal(size=(3, 1, 8, 8, 8))
        tgt = (rng.random((1, 8, 8, 8)) < 0.2).astype(float)
        cases.append((f"end_to_end_{agg}", MODEL_TOL,
                      lambda model=model, series=series, tgt=tgt:
                      soft_dice_bce_loss(model(series), tgt), model.parameters()))
    return cases


def run_gradcheck(seed: int = 0, max_coords: int | None = None, corrupt: float = 0.0,
                  only: set[str] | None = None) -> list[CheckResult]:
    """Check every component in 64-bit precision.

    ``max_coords`` samples that many coordinates per parameter tensor instead
    of checking all of them.
    """
    with precision("f64"):
        rng = np.random.default_rng(seed)
        results = []
        for name, tol, f, params in _cases(rng):
            if only is not None and name not in only:
                continue
            err = finite_diff_check(f, params, FD_EPS, max_coords=max_coords,
                                    rng=np.random.default_rng(seed), corrupt=corrupt)
            results.append(CheckResult(name, err, tol))
    return results
