"""Deterministic synthetic cities and traffic days at desk scale.

Roads are a sparse union of axis-aligned segments (1-5% of cells, matching
the sparsity regime of real rasters).  Traffic on roads follows a smooth
diurnal curve plus optional Gaussian noise; everything off-road is exactly
zero.  A multiplicative ``scale_factor`` rescales a whole day before
rounding, which is what the historic-baseline shift test relies on.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from .raster import CHANNELS, RasterMeta, RasterMovie, SLOTS_PER_DAY, SPEED_CHANNELS, VOLUME_CHANNELS

# Desk-scale default keeps 495x436's non-divisibility, so clamped edge tiles
# stay exercised.
DEFAULT_HEIGHT = 99
DEFAULT_WIDTH = 87

ROAD_DENSITY_MIN = 0.01
ROAD_DENSITY_MAX = 0.05
_ROAD_DENSITY_TARGET = 0.03

# Peak congestion knocks this fraction off free-flow speed at full amplitude.
_CONGESTION = 0.25


@dataclass
class CityTemplate:
    height: int
    width: int
    road_mask: np.ndarray
    seed: int

    @property
    def density(self) -> float:
        return float(self.road_mask.mean())


@dataclass
class DayParams:
    base_volume: float = 120.0
    diurnal_amplitude: float = 0.8
    noise_sigma: float = 6.0
    scale_factor: float = 1.0
    date: dt.date = field(default_factory=lambda: dt.date(2019, 1, 7))

    def __post_init__(self):
        if isinstance(self.date, str):
            self.date = dt.date.fromisoformat(self.date)
        if self.scale_factor <= 0:
            raise ValueError(f"scale_factor must be positive, got {self.scale_factor}")
        if not 0.0 <= self.diurnal_amplitude <= 1.0:
            raise ValueError(f"diurnal_amplitude must be in [0, 1], got {self.diurnal_amplitude}")


def gen_city(seed: int, height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH) -> CityTemplate:
    """Generate a road mask as a union of random axis-aligned segments.

    Deterministic for a fixed seed.  Segments are added until the road
    density reaches ~3%; segment lengths are capped so the final density
    stays inside [1%, 5%].
    """
    if height < 16 or width < 16:
        raise ValueError(f"city must be at least 16x16 cells, got {height}x{width}")
    rng = np.random.default_rng(seed)
    mask = np.zeros((height, width), dtype=bool)
    n_cells = height * width
    target = round(_ROAD_DENSITY_TARGET * n_cells)
    # Cap per-segment growth at 1.5% of the grid so we cannot overshoot 5%.
    growth_cap = max(3, int(0.015 * n_cells))
    for _ in range(10 * n_cells):
        if mask.sum() >= target:
            break
        horizontal = rng.random() < 0.5
        extent = width if horizontal else height
        length = int(rng.integers(3, min(max(extent // 3, 4), growth_cap + 1)))
        if horizontal:
            r = int(rng.integers(0, height))
            c = int(rng.integers(0, width - length + 1))
            mask[r, c : c + length] = True
        else:
            r = int(rng.integers(0, height - length + 1))
            c = int(rng.integers(0, width))
            mask[r : r + length, c] = True
    density = mask.mean()
    if not ROAD_DENSITY_MIN <= density <= ROAD_DENSITY_MAX:
        raise ValueError(f"road density {density:.4f} outside [{ROAD_DENSITY_MIN}, {ROAD_DENSITY_MAX}]")
    return CityTemplate(height=height, width=width, road_mask=mask, seed=int(seed))


def free_flow_speed(city: CityTemplate) -> np.ndarray:
    """Per-cell free-flow speed, even integers in [50, 118], fixed per city."""
    rng = np.random.default_rng([city.seed, 1])
    return 2.0 * rng.integers(25, 60, size=(city.height, city.width)).astype(np.float32)


def day_profile(city: CityTemplate, params: DayParams, slots: int = SLOTS_PER_DAY) -> np.ndarray:
    """Pre-noise, pre-clamp, unit-scale traffic values, float32 (T, H, W, 8).

    Volume channels carry base_volume modulated by the diurnal curve; speed
    channels carry the per-cell free-flow speed reduced at peak load.  With
    diurnal_amplitude == 0 both are constant over the day.
    """
    t = np.arange(slots, dtype=np.float32)
    curve = 0.5 + 0.5 * np.sin(2.0 * np.pi * (t - 96.0) / 288.0)  # in [0, 1], peaks mid-day
    a = np.float32(params.diurnal_amplitude)
    vol_t = np.float32(params.base_volume) * ((1.0 - a) + a * curve)
    spd_t = 1.0 - np.float32(_CONGESTION) * a * curve
    free = free_flow_speed(city)

    out = np.zeros((slots, city.height, city.width, CHANNELS), dtype=np.float32)
    rows, cols = np.nonzero(city.road_mask)
    for ch in VOLUME_CHANNELS:
        out[:, rows, cols, ch] = vol_t[:, None]
    for ch in SPEED_CHANNELS:
        out[:, rows, cols, ch] = free[rows, cols][None, :] * spd_t[:, None]
    return out


def gen_day(
    city: CityTemplate,
    params: DayParams,
    slots: int = SLOTS_PER_DAY,
    city_name: str | None = None,
) -> tuple[RasterMovie, RasterMeta]:
    """Generate one traffic day.

    Values are clamp(round(scale_factor * profile + noise)) on road cells and
    exactly 0 elsewhere.  Deterministic for fixed (city seed, params, date).
    """
    raw = np.float32(params.scale_factor) * day_profile(city, params, slots)
    if params.noise_sigma > 0:
        rng = np.random.default_rng([city.seed, params.date.toordinal()])
        noise = rng.standard_normal(raw.shape, dtype=np.float32) * np.float32(params.noise_sigma)
        raw += noise
    data = np.clip(np.floor(raw + 0.5), 0.0, 255.0).astype(np.uint8)
    data[:, ~city.road_mask, :] = 0
    meta = RasterMeta(city=city_name or f"synth{city.seed}", date=params.date)
    return RasterMovie(data), meta
