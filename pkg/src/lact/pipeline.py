"""Training (soft Dice + BCE, Adam, exponential decay) and tiled inference."""
from __future__ import annotations

import dataclasses
import itertools
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import VolumeSeries, random_crop
from .errors import ConfigError, NumericalError, ShapeError
from .model import (ModelConfig, SegModel, _Reader, load, pack_arrays, pack_header, save)
from .tensor import Tensor, backward, get_dtype, get_precision, make_op, no_grad

log = logging.getLogger(__name__)

TRAIN_STATE_VERSION = 2
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 300
    decay: float = 0.99
    crop: tuple = (16, 16, 16)
    batch_size: int = 1
    loss: str = "soft_dice_plus_bce"
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    positive_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 < self.decay <= 1:
            raise ConfigError(f"decay must lie in (0, 1], got {self.decay}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size != 1:
            raise ConfigError("only batch size 1 is supported")
        if self.loss != "soft_dice_plus_bce" or self.optimizer != "adam":
            raise ConfigError(f"unsupported loss/optimizer {self.loss}/{self.optimizer}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "crop" in d:
            d["crop"] = tuple(d["crop"])
        return cls(**d)


def lr_at(config: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    return config.learning_rate * config.decay ** epoch


def soft_dice_bce_loss(pred: Tensor, target, smooth: float = DICE_SMOOTH) -> Tensor:
    """``1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)`` plus mean binary cross-entropy."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise ShapeError(f"loss: prediction {pred.shape} vs target {t.shape}")
    p = pred.data
    t = t.astype(p.dtype)
    n = p.size
    tiny = np.finfo(p.dtype).eps
    pc = np.clip(p, tiny, 1.0 - tiny)
    inside = (p >= tiny) & (p <= 1.0 - tiny)

    inter = float((p * t).sum())
    denom = float(p.sum()) + float(t.sum()) + smooth
    dice_term = 1.0 - (2.0 * inter + smooth) / denom
    bce = -float((t * np.log(pc) + (1.0 - t) * np.log1p(-pc)).sum()) / n

    def _back(g):
        gd = -(2.0 * t * denom - (2.0 * inter + smooth)) / denom ** 2
        gb = np.where(inside, (pc - t) / (pc * (1.0 - pc)), 0.0) / n
        return ((gd + gb) * g).astype(p.dtype), None

    return make_op("soft_dice_bce", np.asarray(dice_term + bce, dtype=p.dtype), (pred, Tensor(t)), _back)


class Adam:
    def __init__(self, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class TrainState:
    model: SegModel
    optimizer: Adam
    config: TrainConfig
    epoch: int = 0
    rng: np.random.Generator = None
    loss_history: list = field(default_factory=list)
    lr_history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, model: SegModel, config: TrainConfig) -> "TrainState":
        config.validate()
        opt = Adam(model.parameters(), config.beta1, config.beta2, config.adam_eps)
        return cls(model, opt, config, 0, np.random.default_rng(config.seed))


def _series_input(series: VolumeSeries) -> np.ndarray:
    return series.volumes[:, None].astype(get_dtype(), copy=False)


def train(model: SegModel, cases: Sequence[tuple[VolumeSeries, np.ndarray]], config: TrainConfig,
          state: TrainState | None = None, stop_epoch: int | None = None,
          on_epoch: Callable[[int, float, float], None] | None = None) -> TrainState:
    """Run (or resume) training until ``stop_epoch`` (default: all epochs).

    Each epoch visits the cases in a seeded random order and takes one Adam
    step on one random crop per case.
    """
    if not cases:
        raise ConfigError("training needs at least one case")
    if state is None:
        state = TrainState.fresh(model, config)
    elif state.model is not model:
        raise ConfigError("resumed state belongs to a different model")
    stop = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    mcfg = model.config
    for series, _ in cases:
        if mcfg.aggregation == "concat" and series.T != mcfg.concat_T:
            raise ConfigError(f"case has T={series.T} but concat model expects {mcfg.concat_T}")

    while state.epoch < stop:
        epoch = state.epoch
        lr = lr_at(config, epoch)
        losses = []
        for i in state.rng.permutation(len(cases)):
            series, mask = cases[i]
            crop, crop_mask, _ = random_crop(series, mask, config.crop, state.rng,
                                             config.positive_fraction)
            model.zero_grad()
            pred = model(_series_input(crop))
            loss = soft_dice_bce_loss(pred, crop_mask[None])
            value = loss.data.item()
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, case index {i}")
            backward(loss)
            state.optimizer.step(lr)
            losses.append(value)
        mean = float(np.mean(losses))
        state.loss_history.append(mean)
        state.lr_history.append(lr)
        state.epoch += 1
        log.debug("epoch %d lr %.6g loss %.6f", epoch, lr, mean)
        if on_epoch is not None:
            on_epoch(epoch, lr, mean)
    model.zero_grad()
    return state


def save_train_state(state: TrainState) -> bytes:
    header = {
        "train_config": state.config.to_dict(),
        "epoch": state.epoch,
        "adam_t": state.optimizer.t,
        "rng_state": state.rng.bit_generator.state,
        "loss_history": state.loss_history,
        "lr_history": state.lr_history,
        "precision": get_precision(),
    }
    model_bytes = save(state.model)
    return (pack_header(TRAIN_STATE_VERSION, header) + struct.pack("<Q", len(model_bytes))
            + model_bytes + pack_arrays(state.optimizer.m + state.optimizer.v))


def load_train_state(buf: bytes, model_config: ModelConfig | None = None) -> TrainState:
    r = _Reader(buf)
    header = r.header(TRAIN_STATE_VERSION)
    (n,) = r.unpack("<Q")
    model = load(r.take(n), model_config)
    moments = r.arrays()
    r.finish()
    config = TrainConfig.from_dict(header["train_config"])
    opt = Adam(model.parameters(), config.beta1, config.beta2, config.adam_eps)
    k = len(opt.params)
    if len(moments) != 2 * k:
        raise ConfigError("optimizer moments do not match the model parameters")
    opt.m = [np.ascontiguousarray(a, dtype=get_dtype()) for a in moments[:k]]
    opt.v = [np.ascontiguousarray(a, dtype=get_dtype()) for a in moments[k:]]
    opt.t = int(header["adam_t"])
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    return TrainState(model, opt, config, int(header["epoch"]), rng,
                      list(header["loss_history"]), list(header["lr_history"]))


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def tile_origins(n: int, tile: int, stride: int) -> list[int]:
    """Tile starts along one axis; the last tile is clamped to end at ``n``."""
    if not 1 <= tile <= n:
        raise ShapeError(f"tile {tile} does not fit extent {n}")
    if not 1 <= stride <= tile:
        raise ShapeError(f"stride {stride} must lie in [1, tile={tile}]")
    origins = list(range(0, n - tile + 1, stride))
    if origins[-1] != n - tile:
        origins.append(n - tile)
    return origins


def coverage(shape, tile, stride) -> np.ndarray:
    """How many tiles cover each voxel."""
    count = np.zeros(shape, dtype=np.int64)
    axes = [tile_origins(n, t, s) for n, t, s in zip(shape, tile, stride)]
    for origin in itertools.product(*axes):
        count[tuple(slice(o, o + t) for o, t in zip(origin, tile))] += 1
    return count


def tiled_infer(model, series: VolumeSeries, tile, stride, workers: int = 1) -> np.ndarray:
    """Average model probabilities over overlapping tiles covering the volume."""
    shape = series.shape
    tile = tuple(int(t) for t in tile)
    stride = tuple(int(s) for s in stride)
    multiple = getattr(model, "spatial_multiple", 1)
    bad = [t for t in tile if t % multiple]
    if bad:
        raise ShapeError(f"tile {tile} must be a multiple of {multiple} in every dim")
    axes = [tile_origins(n, t, s) for n, t, s in zip(shape, tile, stride)]
    origins = list(itertools.product(*axes))
    x = _series_input(series)

    def run(origin):
        sl = tuple(slice(o, o + t) for o, t in zip(origin, tile))
        with no_grad():
            out = model(x[(slice(None), slice(None), *sl)])
        out = out.data if isinstance(out, Tensor) else np.asarray(out)
        return sl, out.reshape(tile)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, origins))
    else:
        results = [run(o) for o in origins]

    total = np.zeros(shape, dtype=np.float64)
    count = np.zeros(shape, dtype=np.int64)
    for sl, out in results:   # fixed tile order keeps the sum independent of scheduling
        total[sl] += out
        count[sl] += 1
    if count.min() < 1:
        raise AssertionError("tiling left voxels uncovered")
    return total / count
