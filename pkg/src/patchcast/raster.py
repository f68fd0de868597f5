"""Raster movie data model and flat binary file I/O.

On-disk layout (little-endian):

    magic (4 bytes) | version u8 | T u32 | H u32 | W u32 | C u32 | payload

The payload holds T*H*W*C unsigned bytes in row-major (t, row, col, channel)
order, channel fastest.  Day movies use magic ``T4CR`` (extension ``.t4cr``),
prediction files use magic ``T4CP`` (extension ``.t4cp``) with T equal to the
number of predicted frames.
"""

from __future__ import annotations

import datetime as dt
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    RasterFormatError,
    TruncatedFileError,
    UnsupportedVersionError,
)

MAGIC_RASTER = b"T4CR"
MAGIC_PREDICTION = b"T4CP"
FORMAT_VERSION = 1

SLOTS_PER_DAY = 288
CHANNELS = 8
# 4 headings x (traffic count, mean speed); counts sit on even indices.
VOLUME_CHANNELS = (0, 2, 4, 6)
SPEED_CHANNELS = (1, 3, 5, 7)

SCALE_NORMALIZED = "normalized"
SCALE_UINT8 = "uint8"

_HEADER = struct.Struct("<4sBIIII")

_FILENAME_RE = re.compile(r"^(\d{4}-\d{2}-\d{2})_(.+)\.(t4cr|t4cp)$")


@dataclass
class RasterMovie:
    """One day of traffic for one city: uint8 values indexed (t, row, col, ch)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ValueError(f"movie data must be 4-d (t, h, w, c), got shape {self.data.shape}")
        if self.data.dtype != np.uint8:
            raise ValueError(f"movie data must be uint8, got {self.data.dtype}")

    @property
    def t_slots(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]


@dataclass(frozen=True)
class RasterMeta:
    """City and calendar context of a movie; weekday is always derived."""

    city: str
    date: dt.date

    @property
    def weekday(self) -> int:
        return weekday_of(self.date)


@dataclass
class PredictionTensor:
    """Predicted frames, carrying an explicit value-scale flag.

    ``scale`` is either "normalized" (values in [0, 1]) or "uint8" (values on
    the 0..255 scale; the array may still be float, e.g. pre-quantization
    stitched means).
    """

    data: np.ndarray
    scale: str = SCALE_NORMALIZED

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ValueError(f"prediction data must be 4-d (f, h, w, c), got shape {self.data.shape}")
        if self.scale not in (SCALE_NORMALIZED, SCALE_UINT8):
            raise ValueError(f"unknown scale flag {self.scale!r}")
        if self.data.size:
            lo, hi = float(self.data.min()), float(self.data.max())
            top = 1.0 if self.scale == SCALE_NORMALIZED else 255.0
            if lo < -1e-9 or hi > top + 1e-9:
                raise ValueError(f"{self.scale} values out of range: [{lo}, {hi}]")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def to_uint8_scale(self) -> "PredictionTensor":
        if self.scale == SCALE_UINT8:
            return self
        return PredictionTensor(self.data.astype(np.float64) * 255.0, SCALE_UINT8)

    def to_normalized(self) -> "PredictionTensor":
        if self.scale == SCALE_NORMALIZED:
            return self
        return PredictionTensor(self.data.astype(np.float64) / 255.0, SCALE_NORMALIZED)

    def quantized(self) -> "PredictionTensor":
        """Round to whole uint8 values (half away from zero, clamped)."""
        if self.scale == SCALE_NORMALIZED:
            q = quantize(self.data)
        else:
            q = np.floor(np.clip(self.data, 0.0, 255.0) + 0.5).astype(np.uint8)
        return PredictionTensor(q, SCALE_UINT8)


def normalize(v):
    """Map uint8 values to [0, 1] by dividing by 255 exactly."""
    if np.isscalar(v):
        return float(v) / 255.0
    return np.asarray(v, dtype=np.float64) / 255.0


def quantize(x):
    """Map [0, 1] values to uint8: clamp, scale by 255, round half up."""
    if np.isscalar(x):
        return int(np.floor(min(max(float(x), 0.0), 1.0) * 255.0 + 0.5))
    x = np.asarray(x, dtype=np.float64)
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def weekday_of(date) -> int:
    """Weekday of a Gregorian date, 0 = Monday .. 6 = Sunday."""
    if isinstance(date, str):
        try:
            date = dt.date.fromisoformat(date)
        except ValueError as e:
            raise ValueError(f"cannot parse date {date!r}: {e}") from e
    return date.weekday()


def raster_filename(meta: RasterMeta, kind: str = "t4cr") -> str:
    return f"{meta.date.isoformat()}_{meta.city}.{kind}"


def parse_raster_filename(path) -> RasterMeta:
    """Recover (city, date) from a YYYY-MM-DD_CITY.t4cr style filename."""
    name = Path(path).name
    m = _FILENAME_RE.match(name)
    if m is None:
        raise ValueError(f"filename {name!r} does not match YYYY-MM-DD_CITY.t4cr")
    return RasterMeta(city=m.group(2), date=dt.date.fromisoformat(m.group(1)))


def _write_array(arr: np.ndarray, path, magic: bytes) -> None:
    t, h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(magic, FORMAT_VERSION, t, h, w, c))
        np.ascontiguousarray(arr).tofile(f)


def _read_array(path, magic: bytes) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) < 4:
            raise TruncatedFileError(f"{path}: file too short for a magic header")
        if header[:4] != magic:
            raise BadMagicError(f"{path}: bad magic {header[:4]!r}, expected {magic!r}")
        if len(header) < _HEADER.size:
            raise TruncatedFileError(f"{path}: incomplete header ({len(header)} bytes)")
        _, version, t, h, w, c = _HEADER.unpack(header)
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(f"{path}: version {version}, expected {FORMAT_VERSION}")
        count = t * h * w * c
        payload = np.fromfile(f, dtype=np.uint8, count=count)
        if payload.size < count:
            raise TruncatedFileError(f"{path}: payload has {payload.size} of {count} bytes")
        if f.read(1):
            raise RasterFormatError(f"{path}: trailing bytes after payload")
    return payload.reshape(t, h, w, c)


def write_raster(movie: RasterMovie, path) -> None:
    """Write a movie to the byte-deterministic T4CR format."""
    _write_array(movie.data, path, MAGIC_RASTER)


def read_raster(path) -> RasterMovie:
    """Read a T4CR file; exact inverse of write_raster."""
    return RasterMovie(_read_array(path, MAGIC_RASTER))


def write_prediction(pred: PredictionTensor, path) -> None:
    """Write prediction frames as a T4CP file (payload quantized to uint8)."""
    _write_array(pred.quantized().data, path, MAGIC_PREDICTION)


def read_prediction(path) -> PredictionTensor:
    return PredictionTensor(_read_array(path, MAGIC_PREDICTION), scale=SCALE_UINT8)
