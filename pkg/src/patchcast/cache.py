"""Cached sampling pipeline for training and validation.

Every refresh loads m files and draws k random patches per file; the
resulting m*k samples are iterated for refresh_every epochs before the next
refresh.  Validation samples are drawn once per run and frozen so learning
curves stay comparable across epochs.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, CoverageError
from .geometry import (
    PatchSpec,
    extract_input,
    extract_target,
    sample_patch_origin,
)
from .raster import RasterMovie, parse_raster_filename, read_raster


@dataclass
class CacheConfig:
    m: int = 100
    k: int = 10
    refresh_every: int = 2
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.k < 1:
            raise ValueError(f"m and k must be >= 1, got m={self.m} k={self.k}")
        if self.refresh_every < 1:
            raise ValueError(f"refresh_every must be >= 1, got {self.refresh_every}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def epoch_size(self) -> int:
        return self.m * self.k


@dataclass(frozen=True)
class SampleMeta:
    city: str
    date: dt.date
    t0: int
    origin: tuple[int, int]


@dataclass
class Sample:
    """One training sample: folded input planes, folded target planes, provenance."""

    input: np.ndarray
    target: np.ndarray
    meta: SampleMeta


@dataclass
class RasterSample:
    """A full-raster evaluation sample: raw input hour and ground-truth frames."""

    input_slots: np.ndarray  # uint8 (in_slots, H, W, C)
    target_frames: np.ndarray  # uint8 (out_frames, H, W, C)
    meta: SampleMeta


def max_t0(t_slots: int, spec: PatchSpec) -> int:
    """Largest t0 whose input window and all target offsets stay in range."""
    return t_slots - spec.in_slots - spec.out_offsets[-1]


def _load(path) -> RasterMovie:
    try:
        return read_raster(path)
    except OSError as e:
        raise RuntimeError(f"cannot load training file {path}: {e}") from e


def _draw_samples(files: Sequence, n_files: int, k: int, spec: PatchSpec, rng: np.random.Generator) -> list[Sample]:
    if not files:
        raise ValueError("file list is empty")
    files = list(files)
    replace = len(files) < n_files
    picks = rng.choice(len(files), size=n_files, replace=replace)
    samples = []
    for idx in picks:
        path = files[int(idx)]
        movie = _load(path)
        meta = parse_raster_filename(path)
        t_hi = max_t0(movie.t_slots, spec)
        if t_hi < 0:
            raise ValueError(f"{path}: movie has {movie.t_slots} slots, needs at least "
                             f"{spec.in_slots + spec.out_offsets[-1]}")
        for _ in range(k):
            t0 = int(rng.integers(0, t_hi + 1))
            origin = sample_patch_origin(rng, movie.height, movie.width, spec.d)
            samples.append(Sample(
                input=extract_input(movie, t0, origin, spec),
                target=extract_target(movie, t0, origin, spec),
                meta=SampleMeta(meta.city, meta.date, t0, origin),
            ))
    return samples


def build_cache(file_list: Sequence, spec: PatchSpec, cfg: CacheConfig, rng: np.random.Generator) -> list[Sample]:
    """Draw the m*k samples of one cache generation.

    Files are drawn uniformly without replacement, falling back to drawing
    with replacement when fewer than m files exist.
    """
    return _draw_samples(file_list, cfg.m, cfg.k, spec, rng)


def epoch_iter(cache: Sequence[Sample], batch_size: int, epoch_index: int, seed: int) -> Iterator[list]:
    """Yield the cache once, shuffled, in batches; the last batch may be short.

    The order is a pure function of (seed, epoch_index), so reruns of the
    same epoch see the same batches.
    """
    if not cache:
        raise ValueError("cache is empty")
    order = np.random.default_rng([seed, epoch_index]).permutation(len(cache))
    for lo in range(0, len(cache), batch_size):
        yield [cache[i] for i in order[lo : lo + batch_size]]


def needs_refresh(epoch_index: int, cfg: CacheConfig) -> bool:
    """True when entering this epoch should rebuild the cache (epoch 0 never does)."""
    return epoch_index > 0 and epoch_index % cfg.refresh_every == 0


def build_validation(
    city_files: Sequence,
    n_files: int,
    k: int,
    spec: PatchSpec,
    rng: np.random.Generator,
    train_cities: Sequence[str] | None = None,
) -> list[Sample]:
    """Freeze a validation set of n_files * k samples from one held-out city."""
    val_cities = {parse_raster_filename(p).city for p in city_files}
    if train_cities is not None:
        overlap = val_cities & set(train_cities)
        if overlap:
            raise ConfigError(f"validation city also used for training: {sorted(overlap)}")
    return _draw_samples(city_files, n_files, k, spec, rng)


def match_metadata_sample(
    target_meta: Sequence[tuple[int, int]],
    source_files: Sequence,
    rng: np.random.Generator,
    spec: PatchSpec,
) -> list[RasterSample]:
    """Sample source days that match a (weekday, slot) metadata list.

    For each requested (weekday, slot) a uniformly random source file with
    that weekday is chosen and the full-raster sample at t0 = slot is
    extracted.  Order follows target_meta.
    """
    by_weekday: dict[int, list] = {}
    for path in source_files:
        by_weekday.setdefault(parse_raster_filename(path).weekday, []).append(path)
    missing = sorted({w for w, _ in target_meta} - by_weekday.keys())
    if missing:
        raise CoverageError(f"no source file for weekday(s) {missing}")

    movies: dict = {}
    out = []
    for weekday, slot in target_meta:
        candidates = by_weekday[weekday]
        path = candidates[int(rng.integers(0, len(candidates)))]
        if path not in movies:
            movies[path] = _load(path)
        movie = movies[path]
        if slot < 0 or slot > max_t0(movie.t_slots, spec):
            raise ValueError(f"slot {slot} out of range for {movie.t_slots}-slot movie")
        meta = parse_raster_filename(path)
        gt_slots = [slot + spec.in_slots - 1 + o for o in spec.out_offsets]
        out.append(RasterSample(
            input_slots=movie.data[slot : slot + spec.in_slots],
            target_frames=movie.data[gt_slots],
            meta=SampleMeta(meta.city, meta.date, slot, (0, 0)),
        ))
    return out
