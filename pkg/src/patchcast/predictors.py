"""Reference predictors and the training loop.

Three predictors ship with the package:

* ``PersistencePredictor`` repeats the last observed slot.
* The historic-average baseline predicts per-(weekday, slot) mean rasters,
  rescaled by the ratio of the observed previous hour to its historical
  mean, so a city-wide multiplicative level shift cancels out exactly.
* ``LinearModel`` is a trainable per-cell channel map (48 x 96 weights plus
  bias, sigmoid output) used to exercise the full training pipeline; real
  networks integrate by writing prediction files instead.

Every predictor returns values in [0, 1] over the padded patch extent; the
framework crops the center d x d before stitching.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cache import CacheConfig, Sample, build_cache, epoch_iter, needs_refresh
from .errors import (
    BadMagicError,
    CoverageError,
    DivergenceError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .geometry import PatchSpec, crop_center
from .raster import CHANNELS, SPEED_CHANNELS, VOLUME_CHANNELS, parse_raster_filename, read_raster

MAGIC_CHECKPOINT = b"T4CK"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sBIQ")


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# --------------------------------------------------------------------------
# simple predictors
# --------------------------------------------------------------------------


class PersistencePredictor:
    """Repeat the last input slot for every output frame."""

    def __init__(self, spec: PatchSpec):
        self.spec = spec

    def predict(self, planes: np.ndarray) -> np.ndarray:
        spec = self.spec
        if planes.ndim != 3 or planes.shape[0] != spec.in_planes:
            raise ValueError(f"input shape {planes.shape} does not match {spec.in_planes} planes")
        last = planes[(spec.in_slots - 1) * CHANNELS : spec.in_slots * CHANNELS]
        return np.tile(last, (spec.out_frames, 1, 1))


# --------------------------------------------------------------------------
# historic-average baseline
# --------------------------------------------------------------------------


@dataclass
class AvgTable:
    """Per-(weekday, slot, cell, channel) mean traffic on the 0..255 scale."""

    means: dict[int, np.ndarray]  # weekday -> float64 (T, H, W, C)
    counts: dict[int, int]  # weekday -> number of averaged files
    city: str
    year: int


def fit_historic_average(files, weekdays=None) -> AvgTable:
    """Average one city's day files per weekday.

    weekdays selects which weekdays the table must hold (default: all 7).
    A requested weekday with no file raises CoverageError.
    """
    wanted = set(range(7)) if weekdays is None else {int(w) for w in weekdays}
    by_weekday: dict[int, list] = {}
    metas = []
    for path in files:
        meta = parse_raster_filename(path)
        metas.append(meta)
        by_weekday.setdefault(meta.weekday, []).append(path)
    missing = sorted(wanted - by_weekday.keys())
    if missing:
        raise CoverageError(f"no training file for weekday(s) {missing}")
    cities = {m.city for m in metas}
    if len(cities) > 1:
        raise ValueError(f"historic average expects a single city, got {sorted(cities)}")

    means: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for w in sorted(wanted):
        acc = None
        for path in by_weekday[w]:
            data = read_raster(path).data.astype(np.float64)
            acc = data if acc is None else acc + data
        means[w] = acc / len(by_weekday[w])
        counts[w] = len(by_weekday[w])
    return AvgTable(means=means, counts=counts, city=cities.pop(), year=metas[0].date.year)


def predict_historic_shifted(
    table: AvgTable,
    prev_hour: np.ndarray,
    t_hat: int,
    weekday: int,
    out_offsets=(1, 2, 3, 6, 9, 12),
    ratio_max: float = 10.0,
) -> np.ndarray:
    """Historic mean at the target slots, rescaled by the previous hour.

    prev_hour is the observed uint8 (12, H, W, C) block at slots
    t_hat-12 .. t_hat-1.  Per cell and channel the ratio of its mean to the
    table's mean over the same window rescales the table value at each
    predicted slot; a zero historical window forces the ratio to 1 and the
    ratio is clamped to [0, ratio_max].  Returns float64 (frames, H, W, C)
    clamped to [0, 255].
    """
    if weekday not in table.means:
        raise CoverageError(f"table holds no weekday {weekday}")
    avg = table.means[weekday]
    t_len = avg.shape[0]
    window = prev_hour.shape[0]
    if t_hat < window:
        raise ValueError(f"t_hat={t_hat} leaves no room for a {window}-slot observed window")
    if t_hat - 1 + max(out_offsets) >= t_len:
        raise ValueError(f"t_hat={t_hat} with offsets {tuple(out_offsets)} exceeds {t_len} slots")
    if prev_hour.shape[1:] != avg.shape[1:]:
        raise ValueError(f"observed shape {prev_hour.shape[1:]} does not match table {avg.shape[1:]}")

    observed = prev_hour.astype(np.float64).mean(axis=0)
    historic = avg[t_hat - window : t_hat].mean(axis=0)
    ratio = np.ones_like(historic)
    nz = historic > 0
    ratio[nz] = observed[nz] / historic[nz]
    np.clip(ratio, 0.0, ratio_max, out=ratio)

    frames = np.stack([avg[t_hat + o - 1] * ratio for o in out_offsets])
    return np.clip(frames, 0.0, 255.0)


# --------------------------------------------------------------------------
# trainable per-cell linear model
# --------------------------------------------------------------------------


@dataclass
class LinearModel:
    """Per-cell linear channel map with sigmoid output."""

    weights: np.ndarray  # (out_planes, in_planes)
    bias: np.ndarray  # (out_planes,)

    @classmethod
    def init(cls, rng: np.random.Generator, in_planes: int = 96, out_planes: int = 48) -> "LinearModel":
        scale = np.sqrt(6.0 / (in_planes + out_planes))
        return cls(
            weights=rng.uniform(-scale, scale, size=(out_planes, in_planes)),
            bias=np.zeros(out_planes, dtype=np.float64),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": self.bias}

    def predict(self, planes: np.ndarray) -> np.ndarray:
        return forward_linear(self, planes)


def _flat_cells(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def forward_linear(model: LinearModel, planes: np.ndarray) -> np.ndarray:
    """sigmoid(W x + b) applied independently at every cell.

    planes has shape (in_planes, ...); the output keeps the trailing shape
    with in_planes replaced by out_planes.
    """
    if not (np.isfinite(model.weights).all() and np.isfinite(model.bias).all()):
        raise ValueError("model parameters contain non-finite values")
    if planes.shape[0] != model.weights.shape[1]:
        raise ValueError(f"input has {planes.shape[0]} planes, model expects {model.weights.shape[1]}")
    x = _flat_cells(np.asarray(planes, dtype=np.float64))
    z = model.weights @ x + model.bias[:, None]
    return sigmoid(z).reshape(model.weights.shape[0], *planes.shape[1:])


def loss_mse(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over all elements of the squared difference."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.mean(diff * diff))


def _speed_mask(target: np.ndarray, volume_gt: np.ndarray) -> np.ndarray:
    """Contribution mask: volume planes always, speed planes where gt volume > 0."""
    if volume_gt.shape != target.shape:
        raise ValueError(f"volume_gt shape {volume_gt.shape} does not match target {target.shape}")
    n_planes = target.shape[0]
    if n_planes % CHANNELS:
        raise ValueError(f"{n_planes} planes do not split into {CHANNELS} channels")
    mask = np.ones_like(target, dtype=bool)
    for f in range(n_planes // CHANNELS):
        for vol_ch, spd_ch in zip(VOLUME_CHANNELS, SPEED_CHANNELS):
            mask[f * CHANNELS + spd_ch] = volume_gt[f * CHANNELS + vol_ch] > 0
    return mask


def loss_masked_speed(pred: np.ndarray, target: np.ndarray, volume_gt: np.ndarray) -> float:
    """MSE where speed elements only count on nonzero ground-truth volume.

    volume_gt is plane-folded like target; its volume planes gate the paired
    speed planes of the same frame.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    mask = _speed_mask(target, volume_gt)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no element contributes to the masked loss")
    diff = (pred.astype(np.float64) - target.astype(np.float64))[mask]
    return float(np.sum(diff * diff) / n)


def backward_linear(model: LinearModel, planes: np.ndarray, target: np.ndarray,
                    loss_kind: str = "mse") -> dict[str, np.ndarray]:
    """Analytic gradients of the selected loss for the linear model.

    With p = sigmoid(Wx + b): delta = dL/dpred * p * (1 - p); grad_W sums
    delta x^T over cells and grad_b sums delta.  target must match the
    output shape (same trailing cell dims as planes).
    """
    x = _flat_cells(np.asarray(planes, dtype=np.float64))
    t = _flat_cells(np.asarray(target, dtype=np.float64))
    p = sigmoid(model.weights @ x + model.bias[:, None])
    if loss_kind == "mse":
        g = (2.0 / p.size) * (p - t)
    elif loss_kind == "masked_speed":
        mask = _speed_mask(target, target).reshape(t.shape)
        n = int(mask.sum())
        if n == 0:
            raise ValueError("no element contributes to the masked loss")
        g = (2.0 / n) * (p - t) * mask
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    delta = g * p * (1.0 - p)
    return {"weights": delta @ x.T, "bias": delta.sum(axis=1)}


def _batch_loss(pred: np.ndarray, target: np.ndarray, loss_kind: str) -> float:
    if loss_kind == "mse":
        return loss_mse(pred, target)
    return loss_masked_speed(pred, target, target)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """One Adam update with bias correction, applied to params in place."""
    state.step += 1
    b1c = 1.0 - state.beta1 ** state.step
    b2c = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    epoch: int
    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def of(cls, epoch: int, model: LinearModel) -> "Checkpoint":
        return cls(epoch=epoch, weights=model.weights.copy(), bias=model.bias.copy())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """T4CK format: magic | version u8 | epoch u32 | param count u64 | f64 LE."""
    flat = np.concatenate([ckpt.weights.ravel(), ckpt.bias.ravel()]).astype("<f8")
    with open(path, "wb") as f:
        f.write(_CKPT_HEADER.pack(MAGIC_CHECKPOINT, CHECKPOINT_VERSION, ckpt.epoch, flat.size))
        f.write(flat.tobytes())


def load_checkpoint(path, in_planes: int = 96, out_planes: int = 48) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file too short for a magic header")
    if raw[:4] != MAGIC_CHECKPOINT:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC_CHECKPOINT!r}")
    if len(raw) < _CKPT_HEADER.size:
        raise TruncatedFileError(f"{path}: incomplete header")
    _, version, epoch, count = _CKPT_HEADER.unpack_from(raw)
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    expected = out_planes * in_planes + out_planes
    if count != expected:
        raise ValueError(f"{path}: {count} parameters, expected {expected} for "
                         f"{out_planes}x{in_planes} weights plus bias")
    body = raw[_CKPT_HEADER.size :]
    if len(body) < 8 * count:
        raise TruncatedFileError(f"{path}: payload has {len(body)} of {8 * count} bytes")
    flat = np.frombuffer(body[: 8 * count], dtype="<f8")
    return Checkpoint(
        epoch=epoch,
        weights=flat[: out_planes * in_planes].reshape(out_planes, in_planes).copy(),
        bias=flat[out_planes * in_planes :].copy(),
    )


def average_checkpoints(checkpoints) -> LinearModel:
    """Elementwise mean of parameter snapshots.

    Computed as first + mean(diff) so averaging n identical checkpoints
    reproduces them bit-for-bit.
    """
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise ValueError("cannot average an empty checkpoint list")
    w0, b0 = checkpoints[0].weights, checkpoints[0].bias
    dw = np.mean([c.weights - w0 for c in checkpoints], axis=0)
    db = np.mean([c.bias - b0 for c in checkpoints], axis=0)
    return LinearModel(weights=w0 + dw, bias=b0 + db)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoints: list
    train_loss: list  # per batch, normalized scale
    val_mse: list  # per epoch, index 0 = untrained model, normalized scale

    @property
    def val_mse_uint8(self) -> list:
        return [m * 255.0 ** 2 for m in self.val_mse]


def _stack_batch(batch: list[Sample], pad: int) -> tuple[np.ndarray, np.ndarray]:
    # Only the unpadded center carries a target, so train on those cells.
    xs = [_flat_cells(crop_center(s.input, pad)) for s in batch]
    ts = [_flat_cells(s.target) for s in batch]
    return np.concatenate(xs, axis=1), np.concatenate(ts, axis=1)


def validation_mse(model: LinearModel, samples: list[Sample], spec: PatchSpec) -> float:
    x, t = _stack_batch(samples, spec.pad)
    return loss_mse(forward_linear(model, x), t)


def train(
    model: LinearModel,
    train_files,
    val_samples: list[Sample],
    spec: PatchSpec,
    cfg: CacheConfig,
    epochs: int,
    lr: float = 1e-3,
    loss_kind: str = "mse",
) -> TrainResult:
    """Run the cached-sampling training protocol.

    Epoch 0 builds the initial cache; entering an epoch where
    needs_refresh() holds rebuilds it.  Every epoch shuffles the cache,
    updates the model per batch with Adam, scores the frozen validation
    set, and snapshots a checkpoint.
    """
    state = AdamState(lr=lr)
    result = TrainResult(checkpoints=[], train_loss=[], val_mse=[])
    result.val_mse.append(validation_mse(model, val_samples, spec))

    cache: list[Sample] = []
    refresh_count = 0
    for epoch in range(epochs):
        if epoch == 0 or needs_refresh(epoch, cfg):
            cache = build_cache(train_files, spec, cfg, np.random.default_rng([cfg.seed, 101, refresh_count]))
            refresh_count += 1
        for batch_index, batch in enumerate(epoch_iter(cache, cfg.batch_size, epoch, cfg.seed)):
            x, t = _stack_batch(batch, spec.pad)
            pred = forward_linear(model, x)
            loss = _batch_loss(pred, t, loss_kind)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {batch_index}")
            result.train_loss.append(loss)
            grads = backward_linear(model, x, t, loss_kind)
            adam_step(state, model.params(), grads)
        result.val_mse.append(validation_mse(model, val_samples, spec))
        result.checkpoints.append(Checkpoint.of(epoch, model))
    return result
