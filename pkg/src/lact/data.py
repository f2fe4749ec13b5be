"""Synthetic longitudinal lesion cases, volume file I/O and training crops."""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

VOLUME_MAGIC = b"LSV1"
VOLUME_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_HEADER = struct.Struct("<4sII3QB")
LAYOUT_RESTARTS = 20


@dataclass
class VolumeSeries:
    """``volumes[T, D, H, W]``, index 0 oldest (history), last is follow-up."""

    volumes: np.ndarray
    voxel_spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes)
        if self.volumes.ndim != 4:
            raise DataError(f"VolumeSeries needs [T, D, H, W], got {self.volumes.shape}")

    @property
    def T(self) -> int:
        return self.volumes.shape[0]

    @property
    def shape(self) -> tuple:
        return self.volumes.shape[1:]

    def last(self, t: int) -> "VolumeSeries":
        """The ``t`` most recent time points."""
        if not 1 <= t <= self.T:
            raise DataError(f"cannot take {t} time points from a series of {self.T}")
        return VolumeSeries(self.volumes[self.T - t:], self.voxel_spacing)


@dataclass(frozen=True)
class SyntheticConfig:
    shape: tuple = (24, 24, 24)
    static_lesions: int = 3
    new_lesions: int = 2
    enlarging_lesions: int = 1
    # lesions appearing strictly between history and baseline (need T >= 3)
    interval_lesions: int = 1
    radius_range: tuple = (1.5, 3.0)
    lesion_intensity: tuple = (0.75, 1.0)
    background: float = 0.3
    background_amplitude: float = 0.1
    noise_sigma: float = 0.03
    growth_range: tuple = (1.4, 1.8)
    max_attempts: int = 200
    seed: int = 0

    def validate(self) -> None:
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ConfigError(f"shape must be three positive ints, got {self.shape}")
        lo, hi = self.radius_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"radius_range must satisfy 1 <= lo <= hi, got {self.radius_range}")
        glo, ghi = self.growth_range
        if glo <= 1 or ghi < glo:
            raise ConfigError(f"growth_range must satisfy 1 < lo <= hi, got {self.growth_range}")
        ilo, ihi = self.lesion_intensity
        ceiling = self.background + self.background_amplitude + 3 * self.noise_sigma
        if ilo <= ceiling or ihi < ilo:
            raise ConfigError(f"lesion intensity {self.lesion_intensity} must lie above "
                              f"background + amplitude + 3 sigma = {ceiling:.4g}")
        if min(self.static_lesions, self.new_lesions, self.enlarging_lesions,
               self.interval_lesions) < 0:
            raise ConfigError("lesion counts must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        for key in ("shape", "radius_range", "lesion_intensity", "growth_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Lesion:
    kind: str              # static | new | enlarging | interval
    center: np.ndarray
    radii: np.ndarray
    intensity: float
    onset: int = 0         # first time index at which the lesion exists
    growth: float = 1.0    # radius multiplier at the follow-up (enlarging only)

    def radii_at(self, t: int, T: int) -> np.ndarray | None:
        if t < self.onset:
            return None
        if self.kind == "enlarging" and t == T - 1:
            return self.radii * self.growth
        return self.radii


@dataclass
class SyntheticCase:
    series: VolumeSeries
    mask: np.ndarray
    clean: np.ndarray                  # noise-free volumes [T, D, H, W]
    lesion_labels: np.ndarray          # [T, D, H, W] bool lesion tissue
    lesions: list = field(default_factory=list)


def ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = 0.0
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def _smooth_background(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    grids = np.meshgrid(*[np.linspace(0, 1, n) for n in cfg.shape], indexing="ij")
    field_ = np.zeros(cfg.shape)
    for _ in range(3):
        freq = rng.uniform(0.5, 1.5, size=3)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        term = np.ones(cfg.shape)
        for g, f, p in zip(grids, freq, phase):
            term = term * np.cos(2 * np.pi * f * g + p)
        field_ += term
    field_ /= 3.0
    return cfg.background + cfg.background_amplitude * field_


def _place(cfg, rng, taken, max_radii):
    shape = np.array(cfg.shape)
    lo = np.ceil(max_radii).astype(int)
    hi = shape - 1 - lo
    if np.any(hi < lo):
        return None
    for _ in range(cfg.max_attempts):
        center = np.array([rng.integers(a, b + 1) for a, b in zip(lo, hi)], dtype=float)
        box = (center - max_radii - 1, center + max_radii + 1)
        if all(np.any(box[1] < ob[0]) or np.any(box[0] > ob[1]) for ob in taken):
            taken.append(box)
            return center
    return None


def _layout(config, rng, kinds, fu):
    lesions, taken = [], []
    for kind in kinds:
        radii = rng.uniform(*config.radius_range, size=3)
        growth = rng.uniform(*config.growth_range) if kind == "enlarging" else 1.0
        center = _place(config, rng, taken, radii * growth)
        if center is None:
            return None
        onset = {"static": 0, "enlarging": 0, "new": fu,
                 "interval": int(rng.integers(1, fu)) if fu >= 2 else 0}[kind]
        lesions.append(Lesion(kind, center, radii, float(rng.uniform(*config.lesion_intensity)),
                              onset, growth))
    return lesions


def generate_case_detailed(config: SyntheticConfig, T: int) -> SyntheticCase:
    """Generate one case and keep every intermediate needed to audit it."""
    config.validate()
    if T < 2:
        raise ConfigError(f"a case needs T >= 2 time points, got {T}")
    rng = np.random.default_rng(config.seed)
    fu = T - 1
    kinds = (["static"] * config.static_lesions + ["enlarging"] * config.enlarging_lesions
             + ["interval"] * config.interval_lesions + ["new"] * config.new_lesions)
    # a failed layout restarts from the current rng state, so cases that place
    # on the first try are unaffected by the restart budget
    for _ in range(LAYOUT_RESTARTS):
        lesions = _layout(config, rng, kinds, fu)
        if lesions is not None:
            break
    else:
        raise DataError(f"could not place {len(kinds)} lesions in {LAYOUT_RESTARTS} layouts of "
                        f"{config.max_attempts} attempts each; config: "
                        f"{json.dumps(config.to_dict(), sort_keys=True)}")

    background = _smooth_background(config, rng)
    clean = np.empty((T, *config.shape))
    labels = np.zeros((T, *config.shape), dtype=bool)
    for t in range(T):
        vol = background.copy()
        for les in lesions:
            r = les.radii_at(t, T)
            if r is None:
                continue
            m = ellipsoid(config.shape, les.center, r)
            vol[m] = les.intensity
            labels[t] |= m
        clean[t] = vol
    noisy = clean + rng.normal(0.0, config.noise_sigma, size=clean.shape)
    mask = (labels[fu] & ~labels[fu - 1]).astype(np.uint8)
    return SyntheticCase(VolumeSeries(noisy), mask, clean, labels, lesions)


def generate_case(config: SyntheticConfig, T: int) -> tuple[VolumeSeries, np.ndarray]:
    """A series of ``T`` volumes and its follow-up-vs-baseline activity mask."""
    case = generate_case_detailed(config, T)
    return case.series, case.mask


def random_crop(series: VolumeSeries, mask: np.ndarray, size, rng: np.random.Generator,
                positive_fraction: float = 0.5, attempts: int = 50):
    """Crop all volumes and the mask at one random origin.

    With probability ``positive_fraction`` up to ``attempts`` origins are
    drawn until the crop contains an active voxel.
    """
    shape = series.shape
    size = tuple(int(s) for s in size)
    if len(size) != 3 or any(s > n or s < 1 for s, n in zip(size, shape)):
        raise DataError(f"crop size {size} does not fit volume shape {shape}")
    if mask.shape != shape:
        raise DataError(f"mask shape {mask.shape} != volume shape {shape}")

    def draw():
        return tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(shape, size))

    want_positive = rng.random() < positive_fraction
    origin = draw()
    if want_positive and mask.any():
        for _ in range(attempts):
            sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
            if mask[sl].any():
                break
            origin = draw()
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    return VolumeSeries(series.volumes[(slice(None), *sl)], series.voxel_spacing), mask[sl], origin


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def encode_volume(volume: np.ndarray) -> bytes:
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise DataError(f"volumes are 3D, got shape {vol.shape}")
    dt = vol.dtype.newbyteorder("<") if vol.dtype.kind == "f" else vol.dtype
    if dt not in _DTYPE_CODES:
        raise DataError(f"unsupported volume dtype {vol.dtype}; use float32, float64 or uint8")
    if dt.kind == "f" and not np.all(np.isfinite(vol)):
        raise DataError("refusing to write non-finite volume")
    header = _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, 3, *vol.shape, _DTYPE_CODES[dt])
    return header + np.ascontiguousarray(vol, dtype=dt).tobytes()


def decode_volume(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError(f"volume file truncated: {len(buf)} bytes is shorter than the header")
    magic, version, ndims, d, h, w, code = _HEADER.unpack_from(buf)
    if magic != VOLUME_MAGIC:
        raise FormatError(f"bad volume magic {magic!r}, expected {VOLUME_MAGIC!r}")
    if version != VOLUME_VERSION:
        raise FormatError(f"unsupported volume version {version}")
    if ndims != 3:
        raise FormatError(f"expected 3 dims, header says {ndims}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dt = _CODE_DTYPES[code]
    nbytes = d * h * w * dt.itemsize
    payload = buf[_HEADER.size:]
    if len(payload) != nbytes:
        raise FormatError(f"volume payload is {len(payload)} bytes, expected {nbytes}")
    return np.frombuffer(payload, dtype=dt).reshape(d, h, w).copy()


def write_volume(path, volume: np.ndarray) -> None:
    Path(path).write_bytes(encode_volume(volume))


def read_volume(path) -> np.ndarray:
    return decode_volume(Path(path).read_bytes())


def case_name(case_id: int) -> str:
    return f"case_{case_id:03d}"


def write_case(root, case_id: int, series: VolumeSeries, mask: np.ndarray, meta: dict) -> Path:
    d = Path(root) / case_name(case_id)
    d.mkdir(parents=True, exist_ok=True)
    for t in range(series.T):
        write_volume(d / f"t{t}.lsv", series.volumes[t])
    write_volume(d / "activity.lsv", mask.astype(np.uint8))
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return d


def read_case(case_dir) -> tuple[VolumeSeries, np.ndarray, dict]:
    d = Path(case_dir)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise DataError(f"{d} is not a case directory (no meta.json)")
    meta = json.loads(meta_path.read_text())
    T = int(meta["T"])
    vols = [read_volume(d / f"t{t}.lsv") for t in range(T)]
    if len({v.shape for v in vols}) != 1:
        raise DataError(f"{d}: time points have different shapes")
    mask = read_volume(d / "activity.lsv")
    return VolumeSeries(np.stack(vols)), mask, meta
