"""Patch geometry: tiling with clamped edges, coverage, and tensor extraction.

A raster of extent E is tiled with patches of side d at stride s by taking
starts 0, s, 2s, ... and pulling the final start back to E - d so the last
patch ends exactly at the edge.  The number of starts per axis is
ceil((E - d + s) / s).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .raster import CHANNELS, RasterMovie


@dataclass(frozen=True)
class PatchSpec:
    """Geometry of one training/prediction sample.

    d is the patch side length, pad the zero border added around extracted
    inputs, in_slots the number of input time slots, and out_offsets the
    predicted slot offsets relative to the last input slot.
    """

    d: int
    pad: int = 6
    in_slots: int = 12
    out_offsets: tuple[int, ...] = (1, 2, 3, 6, 9, 12)

    def __post_init__(self):
        object.__setattr__(self, "out_offsets", tuple(int(o) for o in self.out_offsets))
        if self.d < 1:
            raise ValueError(f"patch side d must be >= 1, got {self.d}")
        if self.pad < 0:
            raise ValueError(f"pad must be >= 0, got {self.pad}")
        if self.in_slots < 1:
            raise ValueError(f"in_slots must be >= 1, got {self.in_slots}")
        if not self.out_offsets:
            raise ValueError("out_offsets may not be empty")
        if any(b <= a for a, b in zip(self.out_offsets, self.out_offsets[1:])):
            raise ValueError(f"out_offsets must be strictly increasing, got {self.out_offsets}")
        if self.out_offsets[0] < 1 or self.out_offsets[-1] > 12:
            raise ValueError(f"out_offsets must lie in 1..12, got {self.out_offsets}")

    @property
    def out_frames(self) -> int:
        return len(self.out_offsets)

    @property
    def in_planes(self) -> int:
        return self.in_slots * CHANNELS

    @property
    def out_planes(self) -> int:
        return self.out_frames * CHANNELS

    @property
    def padded_side(self) -> int:
        return self.d + 2 * self.pad


@dataclass(frozen=True)
class TileGrid:
    row_starts: tuple[int, ...]
    col_starts: tuple[int, ...]
    d: int
    extent: tuple[int, int]

    @property
    def patch_count(self) -> int:
        return len(self.row_starts) * len(self.col_starts)

    def origins(self) -> Iterator[tuple[int, int]]:
        """All patch origins, row-major."""
        for r in self.row_starts:
            for c in self.col_starts:
                yield (r, c)


def tile_starts(extent: int, d: int, s: int) -> list[int]:
    """Ascending unique patch starts covering [0, extent) with side d, stride s."""
    if d < 1 or d > extent:
        raise ValueError(f"patch side {d} must be in 1..{extent}")
    if s < 1 or s > d:
        raise ValueError(f"stride {s} must be in 1..{d} (cells uncovered otherwise)")
    gap = extent - d
    n = (gap + 2 * s - 1) // s  # == ceil((extent - d + s) / s)
    return [i * s for i in range(n - 1)] + [gap]


def tile_grid(height: int, width: int, d: int, s: int) -> TileGrid:
    return TileGrid(
        row_starts=tuple(tile_starts(height, d, s)),
        col_starts=tuple(tile_starts(width, d, s)),
        d=d,
        extent=(height, width),
    )


def coverage_map(height: int, width: int, grid: TileGrid) -> np.ndarray:
    """Per-cell count of grid patches containing that cell."""
    row_cov = np.zeros(height, dtype=np.int64)
    for r in grid.row_starts:
        row_cov[r : r + grid.d] += 1
    col_cov = np.zeros(width, dtype=np.int64)
    for c in grid.col_starts:
        col_cov[c : c + grid.d] += 1
    return np.outer(row_cov, col_cov)


def sample_patch_origin(rng: np.random.Generator, height: int, width: int, d: int) -> tuple[int, int]:
    """Uniform random patch origin with the whole patch in bounds."""
    if d > height or d > width:
        raise ValueError(f"patch side {d} exceeds extent {height}x{width}")
    return int(rng.integers(0, height - d + 1)), int(rng.integers(0, width - d + 1))


def fold_slots(window: np.ndarray) -> np.ndarray:
    """Fold a (slots, h, w, C) block into (slots*C, h, w) planes, slot-major.

    Plane slot*C + ch holds channel ch of that slot, so slot 0 occupies
    planes 0..C-1, slot 1 planes C..2C-1, and so on.
    """
    s, h, w, c = window.shape
    return np.ascontiguousarray(window.transpose(0, 3, 1, 2)).reshape(s * c, h, w)


def unfold_planes(planes: np.ndarray, channels: int = CHANNELS) -> np.ndarray:
    """Inverse of fold_slots: (F*C, h, w) planes back to (F, h, w, C)."""
    fc, h, w = planes.shape
    if fc % channels:
        raise ValueError(f"{fc} planes do not split into {channels} channels")
    return np.ascontiguousarray(planes.reshape(fc // channels, channels, h, w).transpose(0, 2, 3, 1))


def crop_center(planes: np.ndarray, pad: int) -> np.ndarray:
    """Drop a border of width pad from the two trailing spatial axes."""
    if pad == 0:
        return planes
    return planes[..., pad:-pad, pad:-pad]


def _check_window(movie: RasterMovie, t0: int, origin: tuple[int, int], spec: PatchSpec, t_need: int) -> None:
    r0, c0 = origin
    if t0 < 0 or t0 + t_need > movie.t_slots:
        raise ValueError(f"slots [{t0}, {t0 + t_need}) out of range for {movie.t_slots}-slot movie")
    if r0 < 0 or c0 < 0 or r0 + spec.d > movie.height or c0 + spec.d > movie.width:
        raise ValueError(f"patch at {origin} with side {spec.d} outside {movie.height}x{movie.width}")


def input_window(movie: RasterMovie, t0: int, origin: tuple[int, int], spec: PatchSpec) -> np.ndarray:
    """Raw uint8 (in_slots, d, d, C) crop of the input hour."""
    _check_window(movie, t0, origin, spec, spec.in_slots)
    r0, c0 = origin
    return movie.data[t0 : t0 + spec.in_slots, r0 : r0 + spec.d, c0 : c0 + spec.d, :]


def target_window(movie: RasterMovie, t0: int, origin: tuple[int, int], spec: PatchSpec) -> np.ndarray:
    """Raw uint8 (out_frames, d, d, C) crop of the predicted slots."""
    _check_window(movie, t0, origin, spec, spec.in_slots + spec.out_offsets[-1])
    r0, c0 = origin
    slots = [t0 + spec.in_slots - 1 + o for o in spec.out_offsets]
    return movie.data[slots, r0 : r0 + spec.d, c0 : c0 + spec.d, :]


def fold_input_window(window: np.ndarray, pad: int) -> np.ndarray:
    """Normalize a raw (slots, d, d, C) crop and zero-pad its borders."""
    planes = fold_slots(window.astype(np.float64) / 255.0)
    return np.pad(planes, ((0, 0), (pad, pad), (pad, pad)))


def extract_input(movie: RasterMovie, t0: int, origin: tuple[int, int], spec: PatchSpec) -> np.ndarray:
    """Model input for one patch: (in_slots*C, d+2*pad, d+2*pad), values in [0, 1]."""
    return fold_input_window(input_window(movie, t0, origin, spec), spec.pad)


def extract_target(movie: RasterMovie, t0: int, origin: tuple[int, int], spec: PatchSpec) -> np.ndarray:
    """Training target for one patch: (out_frames*C, d, d), values in [0, 1]."""
    return fold_slots(target_window(movie, t0, origin, spec).astype(np.float64) / 255.0)
