"""Scoring on the 0..255 scale, error decomposition, and the stride sweep.

Reported MSE is always on the uint8 scale (normalized tensors are rescaled
by 255 first); every report labels the scale.  Speed errors are split by
whether the paired ground-truth volume is nonzero (V) or zero (V-bar),
which is where almost all of the speed error hides on sparse rasters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .cache import RasterSample
from .geometry import PatchSpec, tile_grid
from .raster import (
    CHANNELS,
    PredictionTensor,
    RasterMovie,
    SCALE_UINT8,
    SPEED_CHANNELS,
    VOLUME_CHANNELS,
)
from .stitch import predict_tiled


@dataclass
class EvalReport:
    mse_total: float
    mse_volume: float
    mse_speed: float
    mse_speed_on_V: Optional[float]
    mse_speed_on_Vbar: Optional[float]
    count_V: int
    count_Vbar: int
    zero_fraction: float
    zero_recall: Optional[float]

    def to_text(self) -> str:
        lines = [
            "scale=uint8",
            f"mse_total={self.mse_total:.6f}",
            f"mse_volume={self.mse_volume:.6f}",
            f"mse_speed={self.mse_speed:.6f}",
        ]
        if self.mse_speed_on_V is not None:
            lines.append(f"mse_speed_on_V={self.mse_speed_on_V:.6f}")
        if self.mse_speed_on_Vbar is not None:
            lines.append(f"mse_speed_on_Vbar={self.mse_speed_on_Vbar:.6f}")
        lines.append(f"count_V={self.count_V}")
        lines.append(f"count_Vbar={self.count_Vbar}")
        lines.append(f"zero_fraction={self.zero_fraction:.6f}")
        if self.zero_recall is not None:
            lines.append(f"zero_recall={self.zero_recall:.6f}")
        return "\n".join(lines) + "\n"


def _paired_uint8(pred: PredictionTensor, gt: PredictionTensor) -> tuple[np.ndarray, np.ndarray]:
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"shape mismatch: {pred.data.shape} vs {gt.data.shape}")
    if pred.scale != gt.scale:
        raise ValueError(f"mixed scales: prediction is {pred.scale}, ground truth is {gt.scale}")
    p = pred.to_uint8_scale().data.astype(np.float64)
    g = gt.to_uint8_scale().data.astype(np.float64)
    return p, g


def mse_uint8(pred: PredictionTensor, gt: PredictionTensor) -> float:
    """Mean squared error on the 0..255 scale."""
    p, g = _paired_uint8(pred, gt)
    diff = p - g
    return float(np.mean(diff * diff))


def frames_tensor(movie: RasterMovie, t0: int, spec: PatchSpec) -> PredictionTensor:
    """Ground-truth frames of a movie at the spec's offsets, as a uint8-scale tensor."""
    slots = [t0 + spec.in_slots - 1 + o for o in spec.out_offsets]
    if t0 < 0 or slots[-1] >= movie.t_slots:
        raise ValueError(f"t0={t0} with offsets {spec.out_offsets} exceeds {movie.t_slots} slots")
    return PredictionTensor(movie.data[slots], scale=SCALE_UINT8)


def decompose(pred: PredictionTensor, gt: PredictionTensor) -> EvalReport:
    """Split the error into volume/speed parts and speed into V / V-bar.

    A speed element belongs to V iff the ground-truth volume of the same
    heading in the same frame is nonzero.  "Predicted zero" means the
    quantized prediction equals 0.
    """
    p, g = _paired_uint8(pred, gt)
    sq = (p - g) ** 2

    vol = [slice(None)] * 3 + [list(VOLUME_CHANNELS)]
    spd = [slice(None)] * 3 + [list(SPEED_CHANNELS)]
    sq_vol, sq_spd = sq[tuple(vol)], sq[tuple(spd)]
    gt_vol = g[tuple(vol)]

    in_v = gt_vol > 0  # aligned with sq_spd: heading h pairs channels (2h, 2h+1)
    count_v = int(in_v.sum())
    count_vbar = int(in_v.size - count_v)
    mse_v = float(sq_spd[in_v].mean()) if count_v else None
    mse_vbar = float(sq_spd[~in_v].mean()) if count_vbar else None

    pred_q = np.floor(np.clip(p[tuple(vol)], 0.0, 255.0) + 0.5)
    true_zero = ~in_v
    zero_recall = float((pred_q[true_zero] == 0).mean()) if true_zero.any() else None

    return EvalReport(
        mse_total=float(sq.mean()),
        mse_volume=float(sq_vol.mean()),
        mse_speed=float(sq_spd.mean()),
        mse_speed_on_V=mse_v,
        mse_speed_on_Vbar=mse_vbar,
        count_V=count_v,
        count_Vbar=count_vbar,
        zero_fraction=float(true_zero.mean()),
        zero_recall=zero_recall,
    )


def substitute_speed_constant(
    pred: PredictionTensor, gt: PredictionTensor, value: float = 127.0
) -> tuple[PredictionTensor, float, float]:
    """Overwrite speed predictions on V with a constant; report MSE before/after.

    Diagnostic only: V comes from the ground truth, which is unavailable at
    test time.
    """
    p, g = _paired_uint8(pred, gt)
    modified = p.copy()
    for vol_ch, spd_ch in zip(VOLUME_CHANNELS, SPEED_CHANNELS):
        on_v = g[..., vol_ch] > 0
        modified[..., spd_ch][on_v] = value
    mse_before = float(np.mean((p - g) ** 2))
    mse_after = float(np.mean((modified - g) ** 2))
    return PredictionTensor(modified, scale=SCALE_UINT8), mse_before, mse_after


@dataclass(frozen=True)
class SweepRow:
    stride: int
    patches: int
    mse: float


def stride_sweep(
    predictor,
    samples: Sequence[RasterSample],
    spec: PatchSpec,
    strides: Sequence[int],
) -> list[SweepRow]:
    """Tile, predict, stitch, and score every sample at each stride.

    Rows are ordered by stride descending; MSE is the mean over samples on
    the uint8 scale.
    """
    if not samples:
        raise ValueError("no samples to sweep over")
    rows = []
    for stride in sorted(set(int(s) for s in strides), reverse=True):
        height, width = samples[0].input_slots.shape[1:3]
        grid = tile_grid(height, width, spec.d, stride)
        mses = []
        for sample in samples:
            stitched, _ = predict_tiled(predictor, sample.input_slots, spec, stride)
            gt = PredictionTensor(sample.target_frames, scale=SCALE_UINT8)
            mses.append(mse_uint8(stitched.to_uint8_scale(), gt))
        rows.append(SweepRow(stride=stride, patches=grid.patch_count, mse=float(np.mean(mses))))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    lines = ["stride,patches,mse"]
    lines += [f"{r.stride},{r.patches},{r.mse:.6f}" for r in rows]
    return "\n".join(lines) + "\n"
