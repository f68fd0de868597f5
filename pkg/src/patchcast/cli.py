"""Command-line entry point wiring all modules into reproducible experiments.

Subcommands: gen, train, predict, eval, sweep, baseline.  A flat JSON config
file supplies defaults; command-line flags override file values.  Exit codes:
0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cache as cache_mod
from . import evaluation, predictors, synth
from .errors import ConfigError, RasterFormatError
from .geometry import PatchSpec
from .raster import (
    MAGIC_PREDICTION,
    MAGIC_RASTER,
    PredictionTensor,
    RasterMeta,
    SCALE_UINT8,
    parse_raster_filename,
    raster_filename,
    read_prediction,
    read_raster,
    weekday_of,
    write_prediction,
    write_raster,
)
from .stitch import predict_tiled

CITY_NAMES = ["alpha", "bravo", "carol", "delta", "echo", "foxtrot", "golf", "hotel"]


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "out"
    # synthetic data
    n_cities: int = 2
    n_days: int = 4
    city_height: int = 99
    city_width: int = 87
    day_slots: int = 288
    start_date: str = "2019-01-07"
    base_volume: float = 120.0
    diurnal_amplitude: float = 0.8
    noise_sigma: float = 6.0
    scale_factor: float = 1.0
    # patch geometry
    d: int = 32
    pad: int = 6
    in_slots: int = 12
    out_offsets: list = field(default_factory=lambda: [1, 2, 3, 6, 9, 12])
    # cached sampling
    m: int = 10
    k: int = 10
    refresh_every: int = 2
    batch_size: int = 8
    # training
    epochs: int = 6
    lr: float = 1e-3
    loss: str = "mse"
    checkpoint_avg_last: int = 20
    train_cities: list = field(default_factory=list)
    val_city: str = ""
    val_files: int = 10
    val_patches: int = 10
    # evaluation
    sweep_strides: list = field(default_factory=lambda: [3, 6, 10, 16, 24, 32])
    sweep_samples: int = 20
    t0: int = 0
    baseline_city: str = ""
    baseline_t0: int = 130

    def __post_init__(self):
        if self.loss not in ("mse", "masked_speed"):
            raise ConfigError(f"loss must be 'mse' or 'masked_speed', got {self.loss!r}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")

    def patch_spec(self) -> PatchSpec:
        return PatchSpec(d=self.d, pad=self.pad, in_slots=self.in_slots,
                         out_offsets=tuple(self.out_offsets))

    def cache_config(self) -> cache_mod.CacheConfig:
        return cache_mod.CacheConfig(m=self.m, k=self.k, refresh_every=self.refresh_every,
                                     batch_size=self.batch_size, seed=self.seed)


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def load_config(path=None, overrides=None) -> RunConfig:
    values = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(values, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        unknown = sorted(set(values) - _FIELDS)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e


def _city_dirs(data_dir: Path) -> list[Path]:
    return sorted(p for p in data_dir.iterdir() if p.is_dir())


def _city_files(data_dir: Path, city: str) -> list[Path]:
    return sorted((data_dir / city).glob("*.t4cr"))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen(cfg: RunConfig) -> int:
    data_dir = Path(cfg.data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    start = dt.date.fromisoformat(cfg.start_date)
    entries = []
    for i in range(cfg.n_cities):
        name = CITY_NAMES[i] if i < len(CITY_NAMES) else f"city{i}"
        city_seed = cfg.seed + i
        city = synth.gen_city(city_seed, cfg.city_height, cfg.city_width)
        (data_dir / name).mkdir(exist_ok=True)
        for j in range(cfg.n_days):
            params = synth.DayParams(
                base_volume=cfg.base_volume,
                diurnal_amplitude=cfg.diurnal_amplitude,
                noise_sigma=cfg.noise_sigma,
                scale_factor=cfg.scale_factor,
                date=start + dt.timedelta(days=j),
            )
            movie, meta = synth.gen_day(city, params, slots=cfg.day_slots, city_name=name)
            path = data_dir / name / raster_filename(meta)
            write_raster(movie, path)
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            entries.append({
                "path": str(path.relative_to(data_dir)),
                "city": name,
                "date": meta.date.isoformat(),
                "seed": city_seed,
                "sha256": digest,
            })
    manifest = {"seed": cfg.seed, "files": entries}
    (data_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(entries)} file(s) under {data_dir}")
    return 0


def _train_val_files(cfg: RunConfig) -> tuple[list[Path], list[Path], str]:
    data_dir = Path(cfg.data_dir)
    cities = [p.name for p in _city_dirs(data_dir)]
    if not cities:
        raise ConfigError(f"data_dir {data_dir} holds no city directories")
    val_city = cfg.val_city or cities[-1]
    train_cities = list(cfg.train_cities) or [c for c in cities if c != val_city]
    if val_city in train_cities:
        raise ConfigError(f"val_city {val_city!r} appears in train_cities")
    missing = [c for c in train_cities + [val_city] if not _city_files(data_dir, c)]
    if missing:
        raise ConfigError(f"no .t4cr files for city/cities {missing}")
    train_files = [f for c in train_cities for f in _city_files(data_dir, c)]
    return train_files, _city_files(data_dir, val_city), val_city


def cmd_train(cfg: RunConfig) -> int:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = cfg.patch_spec()
    train_files, val_files, val_city = _train_val_files(cfg)

    val_samples = cache_mod.build_validation(
        val_files, cfg.val_files, cfg.val_patches, spec,
        np.random.default_rng([cfg.seed, 303]),
        train_cities=[parse_raster_filename(f).city for f in train_files],
    )
    model = predictors.LinearModel.init(
        np.random.default_rng([cfg.seed, 404]), spec.in_planes, spec.out_planes)
    result = predictors.train(model, train_files, val_samples, spec, cfg.cache_config(),
                              cfg.epochs, lr=cfg.lr, loss_kind=cfg.loss)

    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for ckpt in result.checkpoints:
        predictors.save_checkpoint(ckpt, ckpt_dir / f"epoch_{ckpt.epoch:04d}.t4ck")
    recent = result.checkpoints[-min(len(result.checkpoints), cfg.checkpoint_avg_last):]
    averaged = predictors.average_checkpoints(recent) if recent else model
    predictors.save_checkpoint(predictors.Checkpoint.of(cfg.epochs, averaged), out_dir / "model_avg.t4ck")

    train_csv = ["batch,loss_norm,loss_uint8"]
    train_csv += [f"{i},{l:.9f},{l * 65025.0:.6f}" for i, l in enumerate(result.train_loss)]
    (out_dir / "train_loss.csv").write_text("\n".join(train_csv) + "\n", encoding="utf-8")
    val_csv = ["epoch,mse_norm,mse_uint8"]
    val_csv += [f"{i},{m:.9f},{m * 65025.0:.6f}" for i, m in enumerate(result.val_mse)]
    (out_dir / "val_mse.csv").write_text("\n".join(val_csv) + "\n", encoding="utf-8")

    print(f"validation city: {val_city}")
    for i, m in enumerate(result.val_mse):
        print(f"epoch {i}: val_mse_uint8={m * 65025.0:.4f}")
    return 0


def cmd_predict(cfg: RunConfig, model_path, input_path, stride: int) -> int:
    spec = cfg.patch_spec()
    if stride > spec.d:
        raise ConfigError(f"stride {stride} exceeds patch side {spec.d}")
    ckpt = predictors.load_checkpoint(model_path, spec.in_planes, spec.out_planes)
    model = predictors.LinearModel(ckpt.weights, ckpt.bias)
    movie = read_raster(input_path)
    window = movie.data[cfg.t0 : cfg.t0 + spec.in_slots]
    if window.shape[0] < spec.in_slots:
        raise ConfigError(f"t0={cfg.t0} leaves fewer than {spec.in_slots} input slots")
    stitched, coverage = predict_tiled(model, window, spec, stride)
    grid = tile_grid(movie.height, movie.width, spec.d, stride)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / (Path(input_path).stem + "_pred.t4cp")
    write_prediction(stitched, out_path)
    print(f"patches={grid.patch_count} max_coverage={int(coverage.max())}")
    print(f"wrote={out_path}")
    return 0


def cmd_eval(cfg: RunConfig, pred_path, gt_path) -> int:
    pred = read_prediction(pred_path)
    magic = Path(gt_path).read_bytes()[:4] if Path(gt_path).exists() else b""
    if magic == MAGIC_RASTER:
        gt = evaluation.frames_tensor(read_raster(gt_path), cfg.t0, cfg.patch_spec())
    else:
        gt = read_prediction(gt_path)
    report = evaluation.decompose(pred, gt)
    sys.stdout.write(report.to_text())
    return 0


def cmd_sweep(cfg: RunConfig, model_path=None) -> int:
    spec = cfg.patch_spec()
    data_dir = Path(cfg.data_dir)
    _, val_files, _ = _train_val_files(cfg)
    rng = np.random.default_rng([cfg.seed, 505])

    weekdays = sorted({parse_raster_filename(f).weekday for f in val_files})
    t_slots = read_raster(val_files[0]).t_slots
    t_hi = cache_mod.max_t0(t_slots, spec)
    target_meta = [(int(rng.choice(weekdays)), int(rng.integers(0, t_hi + 1)))
                   for _ in range(cfg.sweep_samples)]
    samples = cache_mod.match_metadata_sample(target_meta, val_files, rng, spec)

    if model_path is not None:
        ckpt = predictors.load_checkpoint(model_path, spec.in_planes, spec.out_planes)
        predictor = predictors.LinearModel(ckpt.weights, ckpt.bias)
    else:
        predictor = predictors.PersistencePredictor(spec)
    rows = evaluation.stride_sweep(predictor, samples, spec, cfg.sweep_strides)

    csv = evaluation.sweep_csv(rows)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "stride_sweep.csv").write_text(csv, encoding="utf-8")
    sys.stdout.write(csv)
    return 0


def cmd_baseline(cfg: RunConfig, input_path, t_hat: int) -> int:
    spec = cfg.patch_spec()
    data_dir = Path(cfg.data_dir)
    meta = parse_raster_filename(input_path)
    city = cfg.baseline_city or meta.city
    table_files = _city_files(data_dir, city)
    if not table_files:
        raise ConfigError(f"no .t4cr files for baseline city {city!r} under {data_dir}")
    weekday = meta.weekday
    table = predictors.fit_historic_average(table_files, weekdays=[weekday])

    movie = read_raster(input_path)
    if t_hat < spec.in_slots:
        raise ConfigError(f"t0={t_hat} must be >= {spec.in_slots} (needs a previous hour)")
    prev_hour = movie.data[t_hat - spec.in_slots : t_hat]
    frames = predictors.predict_historic_shifted(table, prev_hour, t_hat, weekday, spec.out_offsets)
    pred = PredictionTensor(frames, scale=SCALE_UINT8)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / (Path(input_path).stem + "_baseline.t4cp")
    write_prediction(pred, out_path)

    gt = PredictionTensor(movie.data[[t_hat - 1 + o for o in spec.out_offsets]], scale=SCALE_UINT8)
    mse = evaluation.mse_uint8(pred, gt)
    print("scale=uint8")
    print(f"mse={mse:.6f}")
    print(f"wrote={out_path}")
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="flat JSON config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--data-dir", default=None)
    common.add_argument("--out-dir", default=None)

    parser = argparse.ArgumentParser(prog="patchcast",
                                     description="patch-wise traffic prediction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate synthetic cities and days")
    sub.add_parser("train", parents=[common], help="train the reference linear learner")

    p = sub.add_parser("predict", parents=[common], help="tile + predict + stitch one day file")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--stride", type=int, required=True)
    p.add_argument("--t0", type=int, default=None)

    e = sub.add_parser("eval", parents=[common], help="score a prediction file")
    e.add_argument("pred")
    e.add_argument("gt")
    e.add_argument("--t0", type=int, default=None)

    s = sub.add_parser("sweep", parents=[common], help="stride sweep over matched samples")
    s.add_argument("--model", default=None)

    b = sub.add_parser("baseline", parents=[common], help="historic-average shifted baseline")
    b.add_argument("--input", required=True)
    b.add_argument("--city", default=None)
    b.add_argument("--t0", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "data_dir": args.data_dir, "out_dir": args.out_dir}
    if getattr(args, "d", None) is not None:
        overrides["d"] = args.d
    if getattr(args, "t0", None) is not None:
        overrides["t0"] = args.t0
        overrides["baseline_t0"] = args.t0
    if getattr(args, "city", None) is not None:
        overrides["baseline_city"] = args.city
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "predict":
            return cmd_predict(cfg, args.model, args.input, args.stride)
        if args.command == "eval":
            return cmd_eval(cfg, args.pred, args.gt)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.model)
        if args.command == "baseline":
            return cmd_baseline(cfg, args.input, cfg.baseline_t0)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except (RasterFormatError, OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
