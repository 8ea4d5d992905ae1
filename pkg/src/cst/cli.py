"""Command-line surface: simulate | train | eval | bench | inspect-mask.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .formats import read_raster, write_pgm, write_raster
from .metrics import quadrant_scene, synth_scene
from .model import (CstModel, count_flops, count_params, load_checkpoint,
                    nominal_selected_counts)
from .optics import CodedAperture, forward_measure, random_mask
from .rng import STREAM_MASK, STREAM_NOISE, RandomStream
from .sasm import reference_mask
from .train import (RunConfig, apply_precision, desk_run_config, evaluate,
                    load_run_config, make_run_config, train)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_mask(args, h: int, w: int) -> CodedAperture:
    if getattr(args, "mask_file", None):
        mask2d = read_raster(args.mask_file)
        if mask2d.shape != (h, w):
            raise DataError(f"mask file {args.mask_file} is {mask2d.shape}, "
                            f"scene needs {(h, w)}")
        return CodedAperture(mask2d.astype(np.float64))
    seed = args.mask_seed if args.mask_seed is not None else args.seed
    return random_mask(h, w, RandomStream(seed, STREAM_MASK))


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    out = _out_dir(args)
    scenes: list[tuple[str, np.ndarray]] = []
    if args.synth:
        for i in range(args.synth):
            if args.kind == "quadrant":
                cube = quadrant_scene(args.seed + i, args.height, args.width,
                                      args.bands)
            else:
                cube = synth_scene(args.seed + i, args.height, args.width,
                                   args.bands, args.profile)
            name = f"scene_{i:02d}"
            write_raster(out / f"{name}.raster", cube)
            scenes.append((name, cube))
    for path in args.scenes:
        cube = read_raster(path)
        if cube.ndim != 3:
            raise DataError(f"scene {path} is not a 3-D cube: {cube.shape}")
        scenes.append((Path(path).stem, cube.astype(np.float64)))
    if not scenes:
        raise DataError("simulate needs scene files or --synth N")

    h, w = scenes[0][1].shape[:2]
    for name, cube in scenes:
        if cube.shape[:2] != (h, w):
            raise DataError(f"scene '{name}' is {cube.shape[:2]}, expected {(h, w)}")
    mask = _load_mask(args, h, w)
    write_raster(out / "mask.raster", mask.mask2d)
    noise_stream = RandomStream(args.seed, STREAM_NOISE)
    for name, cube in scenes:
        y = forward_measure(cube, mask, args.shift_step, noise=args.noise,
                            noise_stream=noise_stream)
        write_raster(out / f"meas_{name}.raster", y)
        print(f"{name}: cube {cube.shape[0]}x{cube.shape[1]}x{cube.shape[2]} -> "
              f"measurement {y.shape[0]}x{y.shape[1]} (d={args.shift_step}, "
              f"noise={args.noise})")
    echo = {"command": "simulate", "seed": args.seed,
            "mask_seed": args.mask_seed, "shift_step": args.shift_step,
            "noise": args.noise, "synth": args.synth, "kind": args.kind,
            "height": args.height, "width": args.width, "bands": args.bands,
            "profile": args.profile}
    (out / "config.json").write_text(json.dumps(echo, indent=2))
    return 0


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    if args.config:
        config = load_run_config(args.config)
    else:
        config = desk_run_config()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.precision is not None:
        overrides["precision"] = args.precision
    if overrides:
        data = json.loads(config.to_json())
        data.update(overrides)
        config = make_run_config(data)
    return config


def cmd_train(args) -> int:
    config = _run_config(args)
    result = train(config, args.dataset, args.out)
    print(f"trained {result['steps']} steps; final total loss "
          f"{result['final_total']}; checkpoint at {result['checkpoint']}")
    return 0


def cmd_eval(args) -> int:
    if args.precision is not None:
        T.set_default_dtype(np.float64 if args.precision == 64 else np.float32)
    rows = evaluate(args.checkpoint, args.dataset, args.out, sigma=args.sigma)
    for row in rows:
        print(f"{row['scene']}: psnr {row['psnr_db']:.2f} dB, "
              f"ssim {row['ssim']:.4f}")
    mean_psnr = float(np.mean([r["psnr_db"] for r in rows]))
    mean_ssim = float(np.mean([r["ssim"] for r in rows]))
    print(f"mean: psnr {mean_psnr:.2f} dB, ssim {mean_ssim:.4f}")
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(args) -> int:
    out = _out_dir(args)
    if args.config:
        config = load_run_config(args.config)
    else:
        config = make_run_config({"preset": args.preset})
    cfg = config.model_config()
    h, w = args.height, args.width
    cfg.validate_geometry(h, w)
    sigmas = [float(s) for s in args.sigmas.split(",")]
    params = count_params(cfg)

    model = CstModel(cfg, seed=args.seed) if args.runs > 0 else None
    if model is not None:
        gt = synth_scene(args.seed, h, w, cfg.bands, 0.25)
        mask = random_mask(h, w, RandomStream(args.seed, STREAM_MASK))
        y = forward_measure(gt, mask, cfg.shift_step)

    lines = ["sigma,params,attention_flops,total_flops,wall_time_s"]
    for sigma in sigmas:
        report = count_flops(cfg, h, w, selected=nominal_selected_counts(
            cfg, h, w, sigma))
        wall = ""
        if model is not None:
            times = []
            for _ in range(args.runs):
                t0 = time.perf_counter()
                with T.no_grad():
                    model.forward(y, mask.mask2d, sigma=sigma)
                times.append(time.perf_counter() - t0)
            wall = repr(float(np.median(times)))
        lines.append(f"{sigma},{params},{report.attention!r},{report.total!r},{wall}")
        print(f"sigma={sigma}: params={params} attention_flops={report.attention:.3e} "
              f"total_flops={report.total:.3e}"
              + (f" wall={wall}s" if wall else ""))
    (out / "bench.csv").write_text("\n".join(lines) + "\n")
    echo = {"command": "bench", "preset": args.preset, "height": h, "width": w,
            "sigmas": sigmas, "runs": args.runs, "seed": args.seed}
    (out / "config.json").write_text(json.dumps(echo, indent=2))
    return 0


# ---------------------------------------------------------------------------
# inspect-mask
# ---------------------------------------------------------------------------

def cmd_inspect_mask(args) -> int:
    out = _out_dir(args)
    model, extra = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    gt = read_raster(args.scene).astype(np.float64)
    if gt.ndim != 3 or gt.shape[2] != cfg.bands:
        raise DataError(f"scene {args.scene} has shape {gt.shape}, model "
                        f"expects {cfg.bands} bands")
    h, w = gt.shape[:2]
    cfg.validate_geometry(h, w)
    mask_seed = int(extra.get("mask_seed", 0))
    mask = random_mask(h, w, RandomStream(mask_seed, STREAM_MASK))
    y = forward_measure(gt, mask, cfg.shift_step)
    with T.no_grad():
        x_rec, ms, info = model.forward(y, mask.mask2d, sigma=args.sigma)
    m_ref = reference_mask(x_rec.data, gt)
    selection = info["selection"]
    grid_img = np.kron(selection.grid.astype(np.float64),
                       np.ones((cfg.patch_size, cfg.patch_size)))
    write_pgm(out / "ms.pgm", ms.data)
    write_pgm(out / "ms_ref.pgm", m_ref)
    write_pgm(out / "md.pgm", grid_img)
    print(f"selected patches k={selection.k} of "
          f"{selection.grid.size} (grid {selection.grid.shape[0]}x"
          f"{selection.grid.shape[1]}, patch {cfg.patch_size})")
    print(f"images: {h}x{w} -> {out}/ms.pgm, ms_ref.pgm, md.pgm")
    (out / "config.json").write_text(json.dumps({
        "command": "inspect-mask", "checkpoint": str(args.checkpoint),
        "scene": str(args.scene), "sigma": args.sigma,
        "mask_seed": mask_seed}, indent=2))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cst",
        description="Sparse-transformer spectral reconstruction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="synthesize scenes and measurements")
    sim.add_argument("scenes", nargs="*", help="ground-truth scene rasters")
    sim.add_argument("--synth", type=int, default=0, metavar="N",
                     help="generate N synthetic scenes")
    sim.add_argument("--kind", choices=("blobs", "quadrant"), default="blobs")
    sim.add_argument("--height", type=int, default=32)
    sim.add_argument("--width", type=int, default=32)
    sim.add_argument("--bands", type=int, default=4)
    sim.add_argument("--profile", type=float, default=0.25,
                     help="target bright-pixel fraction for blob scenes")
    sim.add_argument("--shift-step", "-d", type=int, default=2)
    sim.add_argument("--noise", choices=("none", "shot11"), default="none")
    sim.add_argument("--mask-seed", type=int, default=None)
    sim.add_argument("--mask-file", default=None)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)

    tr = sub.add_parser("train", help="train a model on a scene directory")
    tr.add_argument("dataset", help="directory of ground-truth scene rasters")
    tr.add_argument("--config", default=None, help="RunConfig JSON path")
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--precision", type=int, choices=(32, 64), default=None)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("checkpoint")
    ev.add_argument("dataset")
    ev.add_argument("--sigma", type=float, default=None,
                    help="override the sparsity ratio at inference")
    ev.add_argument("--precision", type=int, choices=(32, 64), default=None)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    be = sub.add_parser("bench", help="FLOPs/params accounting and wall time")
    be.add_argument("--config", default=None)
    be.add_argument("--preset", default="cst-m")
    be.add_argument("--height", type=int, default=64)
    be.add_argument("--width", type=int, default=64)
    be.add_argument("--sigmas", default="0,0.25,0.5,0.75")
    be.add_argument("--runs", type=int, default=1,
                    help="timed forward passes per sigma (0 = skip timing)")
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--out", required=True)
    be.set_defaults(func=cmd_bench)

    im = sub.add_parser("inspect-mask",
                        help="dump predicted/reference/binary sparsity masks")
    im.add_argument("checkpoint")
    im.add_argument("scene")
    im.add_argument("--sigma", type=float, default=None)
    im.add_argument("--out", required=True)
    im.set_defaults(func=cmd_inspect_mask)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
