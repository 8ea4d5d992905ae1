"""Run configuration, the training loop, and evaluation.

Training follows the standard simulation protocol: ground-truth cubes are
cropped and augmented (right-angle rotations and flips), pushed through the
optical forward model to synthesize measurements, reconstructed, and
supervised by the reconstruction MSE plus the weighted sparsity-mask MSE.
Adam with cosine-annealed learning rate; every random choice is drawn from
an explicit seeded stream, so a (config, seed) pair reproduces checkpoints
bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .formats import (read_raster, scene_paths, write_band_psnr_csv,
                      write_metrics_csv, write_raster)
from .metrics import psnr, psnr_per_band, ssim_cube
from .model import (CstConfig, CstModel, PRESETS, load_checkpoint,
                    save_checkpoint)
from .optics import CodedAperture, forward_measure, random_mask
from .optim import Adam, cosine_lr
from .rng import (STREAM_AUGMENT, STREAM_MASK, STREAM_NOISE, STREAM_SAMPLER,
                  RandomStream)
from .sasm import reconstruction_loss, reference_mask, sparsity_loss
from .tensor import backward


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

_MODEL_KEYS = ("blocks", "channels", "bands", "patch_size", "bucket_size",
               "rounds", "sigma", "loss_weight", "shift_step", "hash_r",
               "weight_mode", "resample_hash")


@dataclass
class RunConfig:
    """Flat JSON-serializable config: model fields plus trainer fields."""

    preset: str | None = None
    blocks: tuple[int, int, int] = (2, 2, 2)
    channels: int = 28
    bands: int = 28
    patch_size: int = 16
    bucket_size: int = 64
    rounds: int = 2
    sigma: float = 0.5
    loss_weight: float = 2.0
    shift_step: int = 2
    hash_r: float = 1.0
    weight_mode: str = "literal"
    resample_hash: bool = False
    epochs: int = 500
    batch_size: int = 5
    lr: float = 4e-4
    seed: int = 0
    mask_seed: int | None = None
    crop: int = 256
    noise: str = "none"
    precision: int = 32

    def __post_init__(self):
        self.blocks = tuple(int(b) for b in self.blocks)
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.noise not in ("none", "shot11"):
            raise ConfigError(f"unknown noise model '{self.noise}'")
        self.model_config()  # surface model-field errors early

    def model_config(self) -> CstConfig:
        return CstConfig(**{k: getattr(self, k) for k in _MODEL_KEYS})

    @property
    def effective_mask_seed(self) -> int:
        return self.seed if self.mask_seed is None else self.mask_seed

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["blocks"] = list(self.blocks)
        return json.dumps(d, indent=2)


def desk_run_config(**overrides) -> RunConfig:
    """The desk-scale trainer preset: micro model, 32x32 crops, and with a
    4-scene dataset exactly 200 optimizer steps."""
    base = dict(preset="cst-micro", crop=32, epochs=100, batch_size=2, lr=1e-2)
    base.update(overrides)
    return make_run_config(base)


def make_run_config(data: dict) -> RunConfig:
    """Build a RunConfig from a plain dict, rejecting unknown keys and
    expanding ``preset`` into model fields (explicit keys win)."""
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = dict(data)
    preset_name = merged.get("preset")
    if preset_name is not None:
        if preset_name not in PRESETS:
            raise ConfigError(f"unknown preset '{preset_name}'; "
                              f"available: {sorted(PRESETS)}")
        preset_cfg = PRESETS[preset_name]()
        for key in _MODEL_KEYS:
            if key not in merged:
                merged[key] = getattr(preset_cfg, key)
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return make_run_config(data)


def apply_precision(config: RunConfig) -> None:
    T.set_default_dtype(np.float64 if config.precision == 64 else np.float32)


# ---------------------------------------------------------------------------
# data handling
# ---------------------------------------------------------------------------

def load_scenes(dataset_dir, bands: int) -> list[tuple[str, np.ndarray]]:
    scenes = []
    for path in scene_paths(dataset_dir):
        cube = read_raster(path).astype(np.float64)
        if cube.ndim != 3:
            raise DataError(f"scene {path} is not a 3-D cube: shape {cube.shape}")
        if cube.shape[2] != bands:
            raise DataError(f"scene {path} has {cube.shape[2]} bands, "
                            f"config expects {bands}")
        scenes.append((path.stem, cube))
    return scenes


def _check_train_geometry(config: RunConfig,
                          scenes: list[tuple[str, np.ndarray]]) -> None:
    cfg = config.model_config()
    cfg.validate_geometry(config.crop, config.crop)
    for name, cube in scenes:
        if cube.shape[0] < config.crop or cube.shape[1] < config.crop:
            raise DataError(f"scene '{name}' {cube.shape[:2]} smaller than "
                            f"crop {config.crop}")


def _augment(cube: np.ndarray, stream: RandomStream) -> np.ndarray:
    """Right-angle rotation plus optional horizontal/vertical flips."""
    k = int(stream.integers(0, 4))
    flip_h = int(stream.integers(0, 2))
    flip_v = int(stream.integers(0, 2))
    out = np.rot90(cube, k, axes=(0, 1))
    if flip_h:
        out = out[:, ::-1, :]
    if flip_v:
        out = out[::-1, :, :]
    return np.ascontiguousarray(out)


def _crop(cube: np.ndarray, size: int, stream: RandomStream) -> np.ndarray:
    h, w = cube.shape[:2]
    top = int(stream.integers(0, h - size + 1)) if h > size else 0
    left = int(stream.integers(0, w - size + 1)) if w > size else 0
    return cube[top:top + size, left:left + size, :]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train(config: RunConfig, dataset_dir, out_dir) -> dict:
    """Train per config; writes checkpoint.cst, loss_log.csv and config.json
    into ``out_dir``. Returns a summary dict."""
    apply_precision(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json())

    scenes = load_scenes(dataset_dir, config.bands)
    _check_train_geometry(config, scenes)
    cfg = config.model_config()
    model = CstModel(cfg, seed=config.seed)

    mask = random_mask(config.crop, config.crop,
                       RandomStream(config.effective_mask_seed, STREAM_MASK))
    sampler = RandomStream(config.seed, STREAM_SAMPLER)
    augment = RandomStream(config.seed, STREAM_AUGMENT)
    noise = RandomStream(config.seed, STREAM_NOISE)

    optimizer = Adam(model.params(), lr=config.lr)
    n_scenes = len(scenes)
    steps_per_epoch = max(1, -(-n_scenes // config.batch_size))
    total_steps = config.epochs * steps_per_epoch

    rows = []
    step = 0
    for _ in range(config.epochs):
        order = sampler.permutation(n_scenes)
        for start in range(0, n_scenes, config.batch_size):
            batch = order[start:start + config.batch_size]
            lr = cosine_lr(step, total_steps, config.lr)
            optimizer.zero_grad()
            l2_sum = 0.0
            ls_sum = 0.0
            for idx in batch:
                gt = _augment(_crop(scenes[idx][1], config.crop, augment), augment)
                y = forward_measure(gt, mask, cfg.shift_step,
                                    noise=config.noise, noise_stream=noise)
                x_rec, ms, _ = model.forward(y, mask.mask2d)
                m_ref = reference_mask(x_rec.data, gt)
                l2 = reconstruction_loss(x_rec, gt)
                ls = sparsity_loss(ms, m_ref)
                loss = (l2 + cfg.loss_weight * ls) / len(batch)
                backward(loss)
                l2_sum += l2.item()
                ls_sum += ls.item()
            optimizer.step(lr)
            l2_mean = l2_sum / len(batch)
            ls_mean = ls_sum / len(batch)
            total = l2_mean + cfg.loss_weight * ls_mean
            rows.append((step, lr, l2_mean, ls_mean, total))
            step += 1

    ckpt = out / "checkpoint.cst"
    save_checkpoint(ckpt, model, extra={
        "mask_seed": config.effective_mask_seed,
        "noise": config.noise,
        "seed": config.seed,
        "steps": step,
    })
    log = out / "loss_log.csv"
    with open(log, "w") as fh:
        fh.write("step,lr,l2,ls,total\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]!r},{r[2]!r},{r[3]!r},{r[4]!r}\n")
    return {"checkpoint": ckpt, "loss_log": log, "steps": step,
            "final_total": rows[-1][4] if rows else None, "model": model}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(checkpoint_path, dataset_dir, out_dir,
             sigma: float | None = None) -> list[dict]:
    """Reconstruct every scene in the dataset and score it; writes metric
    CSVs and reconstruction rasters into ``out_dir``."""
    model, extra = load_checkpoint(checkpoint_path)
    cfg = model.cfg
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({
        "command": "eval", "checkpoint": str(checkpoint_path),
        "dataset": str(dataset_dir), "sigma": sigma,
        "model": dataclasses.asdict(cfg) | {"blocks": list(cfg.blocks)},
        "extra": extra}, indent=2))
    scenes = load_scenes(dataset_dir, cfg.bands)
    mask_seed = int(extra.get("mask_seed", 0))
    noise = extra.get("noise", "none")
    noise_stream = RandomStream(mask_seed, STREAM_NOISE)

    rows = []
    for name, gt in scenes:
        h, w = gt.shape[:2]
        cfg.validate_geometry(h, w)
        mask = random_mask(h, w, RandomStream(mask_seed, STREAM_MASK))
        y = forward_measure(gt, mask, cfg.shift_step, noise=noise,
                            noise_stream=noise_stream)
        with T.no_grad():
            x_rec, _, _ = model.forward(y, mask.mask2d, sigma=sigma)
        rec = x_rec.data.astype(np.float64)
        write_raster(out / f"recon_{name}.raster", rec)
        rows.append({
            "scene": name,
            "psnr_db": psnr(rec, gt),
            "ssim": ssim_cube(rec, gt),
            "band_psnr_db": psnr_per_band(rec, gt),
        })
    write_metrics_csv(out / "metrics.csv", rows)
    write_band_psnr_csv(out / "metrics_bands.csv", rows)
    return rows
