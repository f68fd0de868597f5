"""Merge overlapping per-patch predictions into a full raster by averaging.

Sums accumulate in double precision and a single division happens at
finalize, which keeps the result order-independent to ~1e-12 at the scales
this package runs at.
"""

from __future__ import annotations

import numpy as np

from .errors import CoverageError
from .geometry import PatchSpec, crop_center, fold_input_window, tile_grid, unfold_planes
from .raster import PredictionTensor


class StitchAccumulator:
    """Per-cell running sums and coverage counts for overlapping patches."""

    def __init__(self, height: int, width: int, frames: int, channels: int):
        if min(height, width, frames, channels) < 1:
            raise ValueError("all accumulator dimensions must be positive")
        self.height = height
        self.width = width
        self.frames = frames
        self.channels = channels
        self.sums = np.zeros((frames, height, width, channels), dtype=np.float64)
        self.counts = np.zeros((height, width), dtype=np.int64)

    def add_patch(self, prediction: np.ndarray, origin: tuple[int, int]) -> None:
        """Add one (frames, d, d, channels) patch prediction at origin."""
        prediction = np.asarray(prediction)
        if prediction.ndim != 4 or prediction.shape[0] != self.frames or prediction.shape[3] != self.channels:
            raise ValueError(f"patch shape {prediction.shape} does not match accumulator "
                             f"({self.frames}, d, d, {self.channels})")
        r0, c0 = origin
        d_r, d_c = prediction.shape[1], prediction.shape[2]
        if r0 < 0 or c0 < 0 or r0 + d_r > self.height or c0 + d_c > self.width:
            raise ValueError(f"patch at {origin} with shape {d_r}x{d_c} outside {self.height}x{self.width}")
        if not np.isfinite(prediction).all():
            raise ValueError("patch prediction contains non-finite values")
        self.sums[:, r0 : r0 + d_r, c0 : c0 + d_c, :] += prediction
        self.counts[r0 : r0 + d_r, c0 : c0 + d_c] += 1

    def finalize(self) -> tuple[PredictionTensor, np.ndarray]:
        """Per-cell mean of everything added, plus the coverage grid."""
        if (self.counts == 0).any():
            r, c = np.argwhere(self.counts == 0)[0]
            raise CoverageError(f"cell ({r}, {c}) was never covered by a patch")
        mean = self.sums / self.counts[None, :, :, None]
        return PredictionTensor(mean), self.counts.copy()


def predict_tiled(predictor, window: np.ndarray, spec: PatchSpec, stride: int):
    """Tile an input hour, predict every patch, and stitch the results.

    window is the raw uint8 (in_slots, H, W, C) input; the predictor sees
    each padded patch and its output is center-cropped back to d x d before
    accumulation.  Returns (PredictionTensor normalized, coverage grid).
    """
    slots, height, width, channels = window.shape
    if slots != spec.in_slots:
        raise ValueError(f"window has {slots} slots, spec expects {spec.in_slots}")
    grid = tile_grid(height, width, spec.d, stride)
    acc = StitchAccumulator(height, width, spec.out_frames, channels)
    for r0, c0 in grid.origins():
        planes = fold_input_window(window[:, r0 : r0 + spec.d, c0 : c0 + spec.d, :], spec.pad)
        out = predictor.predict(planes)
        if out.shape != (spec.out_planes, spec.padded_side, spec.padded_side):
            raise ValueError(f"predictor returned shape {out.shape}, expected "
                             f"({spec.out_planes}, {spec.padded_side}, {spec.padded_side})")
        acc.add_patch(unfold_planes(crop_center(out, spec.pad), channels), (r0, c0))
    return acc.finalize()
