"""Multi-encoder-decoder segmentation networks for 4D (time + 3D) input.

The encoder is a single parameter set applied to each time point. Per-level
features are fused across time either by a convGRU fold (``convgru``) or by
channel concatenation (``concat``, the baseline), then decoded U-Net style.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .layers import Conv3dLayer, ConvGRUCell, Layer, ResBlock
from .tensor import (Tensor, avgpool3d, concat_channels, get_dtype, get_precision, sigmoid,
                     upsample3d_nearest)

MAGIC = b"LACT"
MODEL_VERSION = 1
AGGREGATIONS = ("convgru", "concat")
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 3
    base_channels: int = 8
    input_channels: int = 1
    aggregation: str = "convgru"
    concat_T: int | None = None
    blocks_per_level: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 1 or self.input_channels < 1 or self.blocks_per_level < 1:
            raise ConfigError(f"channel and block counts must be positive: {self}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.aggregation == "concat":
            if self.concat_T is None or self.concat_T < 1:
                raise ConfigError("concat aggregation requires concat_T >= 1")
        elif self.concat_T is not None:
            raise ConfigError("concat_T is only meaningful for concat aggregation")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


class _Sequence(Layer):
    """Ordered container of sub-layers registered as ``0``, ``1``, ..."""

    def __init__(self, items: Sequence):
        self.items = list(items)
        self._fields = tuple(str(i) for i in range(len(self.items)))
        for i, item in enumerate(self.items):
            setattr(self, str(i), item)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def __len__(self):
        return len(self.items)


class SegModel(Layer):
    _fields = ("stem", "encoder", "aggregators", "decoder", "head")

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        L = config.levels
        nb = config.blocks_per_level
        ch = [config.channels(l) for l in range(L)]

        self.stem = Conv3dLayer(config.input_channels, ch[0], 3, rng=rng)
        enc = []
        for l in range(L):
            c_prev = ch[0] if l == 0 else ch[l - 1]
            enc.append(_Sequence([ResBlock(c_prev if b == 0 else ch[l], ch[l], rng)
                                  for b in range(nb)]))
        self.encoder = _Sequence(enc)

        if config.aggregation == "convgru":
            self.aggregators = _Sequence([ConvGRUCell(ch[l], ch[l], rng) for l in range(L)])
            fused = ch
        else:
            self.aggregators = None
            fused = [config.concat_T * c for c in ch]
        self.fused_channels = fused

        dec = []
        deeper = fused[L - 1]
        for l in range(L - 2, -1, -1):
            c_in = fused[l] + deeper
            dec.append(_Sequence([ResBlock(c_in if b == 0 else ch[l], ch[l], rng)
                                  for b in range(nb)]))
            deeper = ch[l]
        self.decoder = _Sequence(dec)
        self.head = Conv3dLayer(ch[0], 1, 1, rng=rng)

    @property
    def spatial_multiple(self) -> int:
        return 2 ** (self.config.levels - 1)

    def encode(self, x: Tensor) -> list[Tensor]:
        """Per-level features of a single time point ``x[C, D, H, W]``."""
        h = self.stem(x)
        feats = []
        for l, blocks in enumerate(self.encoder):
            if l > 0:
                h = avgpool3d(h, 2)
            for block in blocks:
                h = block(h)
            feats.append(h)
        return feats

    def aggregate(self, per_time: list[list[Tensor]]) -> list[Tensor]:
        L = self.config.levels
        if self.aggregators is None:
            return [concat_channels([f[l] for f in per_time]) for l in range(L)]
        return [self.aggregators[l].aggregate([f[l] for f in per_time]) for l in range(L)]

    def decode(self, fused: list[Tensor]) -> Tensor:
        L = self.config.levels
        h = fused[L - 1]
        for i, l in enumerate(range(L - 2, -1, -1)):
            h = concat_channels([fused[l], upsample3d_nearest(h, 2)])
            for block in self.decoder[i]:
                h = block(h)
        return sigmoid(self.head(h))

    def check_input(self, x) -> list[Tensor]:
        if isinstance(x, Tensor):
            x = x.data
        if isinstance(x, np.ndarray):
            arr = x
            if arr.ndim == 4:
                arr = arr[:, None]
            if arr.ndim != 5 or arr.shape[1] != self.config.input_channels:
                raise ShapeError(f"expected input [T, {self.config.input_channels}, D, H, W], "
                                 f"got {x.shape}")
            xs = [Tensor(arr[t]) for t in range(arr.shape[0])]
        else:
            xs = list(x)
        if not xs:
            raise ShapeError("input series is empty")
        T = len(xs)
        spatial = xs[0].shape[1:]
        m = self.spatial_multiple
        if any(s % m for s in spatial):
            raise ShapeError(f"spatial dims {spatial} must be divisible by 2^(levels-1) = {m}")
        if any(t.shape[1:] != spatial for t in xs):
            raise ShapeError("all time points must share one spatial shape")
        if self.config.aggregation == "concat" and T != self.config.concat_T:
            raise ShapeError(f"concat model built for T={self.config.concat_T}, got T={T}")
        return xs

    def forward(self, x) -> Tensor:
        """Probabilities ``[1, D, H, W]`` for a series ``[T, 1, D, H, W]`` (oldest first)."""
        xs = self.check_input(x)
        per_time = [self.encode(t) for t in xs]
        return self.decode(self.aggregate(per_time))

    __call__ = forward

    def encoder_state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()
                if n.startswith(("stem.", "encoder."))}

    def load_encoder_state(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for name, arr in state.items():
            if name not in params or params[name].shape != arr.shape:
                raise ConfigError(f"encoder parameter {name} missing or mismatched")
            params[name].data[...] = arr

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def build(config: ModelConfig) -> SegModel:
    return SegModel(config)


def forward(model: SegModel, x) -> Tensor:
    return model.forward(x)


def param_count(model: SegModel) -> int:
    return model.param_count()


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def pack_arrays(arrays: Sequence[np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for a in arrays:
        a = np.ascontiguousarray(a)
        dt = a.dtype.newbyteorder("<")
        out.append(struct.pack("<BI", _DTYPE_CODES[dt], a.ndim))
        out.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(a.astype(dt, copy=False).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated: need {n} bytes at offset {self.pos}, "
                              f"have {len(self.buf) - self.pos}")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return bytes(b)

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def arrays(self) -> list[np.ndarray]:
        (n,) = self.unpack("<I")
        out = []
        for _ in range(n):
            code, ndim = self.unpack("<BI")
            if code not in _CODE_DTYPES:
                raise FormatError(f"unknown dtype code {code}")
            shape = self.unpack(f"<{ndim}Q")
            dt = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            out.append(np.frombuffer(self.take(nbytes), dtype=dt).reshape(shape).copy())
        return out

    def header(self, expected_version: int) -> dict:
        magic = self.take(4)
        if magic != MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
        (version,) = self.unpack("<I")
        if version != expected_version:
            raise FormatError(f"checkpoint version {version}, expected {expected_version}")
        (n,) = self.unpack("<I")
        try:
            return json.loads(self.take(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt checkpoint header: {exc}") from exc

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes in checkpoint")


def pack_header(version: int, header: dict) -> bytes:
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", version, len(text)) + text


def save(model: SegModel) -> bytes:
    """Serialize config, precision and all parameters in registry order."""
    header = {"config": model.config.to_dict(), "precision": get_precision(),
              "param_names": [n for n, _ in model.named_parameters()]}
    return pack_header(MODEL_VERSION, header) + pack_arrays([p.data for p in model.parameters()])


def _load_params(model: SegModel, header: dict, arrays: list[np.ndarray]) -> None:
    named = list(model.named_parameters())
    if header.get("param_names") != [n for n, _ in named] or len(arrays) != len(named):
        raise FormatError("checkpoint parameter registry does not match the model")
    for (name, p), arr in zip(named, arrays):
        if arr.shape != p.shape:
            raise FormatError(f"parameter {name}: shape {arr.shape} != {p.shape}")
        p.data = np.ascontiguousarray(arr, dtype=get_dtype())


def load(buf: bytes, config: ModelConfig | None = None) -> SegModel:
    """Rebuild a model from :func:`save` output; ``config`` must match if given."""
    r = _Reader(buf)
    header = r.header(MODEL_VERSION)
    stored = ModelConfig.from_dict(header["config"])
    if config is not None and config != stored:
        raise ConfigError(f"checkpoint config {stored.canonical()} does not match "
                          f"requested {config.canonical()}")
    arrays = r.arrays()
    r.finish()
    model = SegModel(stored)
    _load_params(model, header, arrays)
    return model
