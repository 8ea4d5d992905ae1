"""On-disk formats: float32 rasters, metric CSVs, and 8-bit PGM previews.

See ``docs/formats.md`` for the byte-level layout of each format.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import DataError

RASTER_SUFFIX = ".raster"


def write_raster(path, arr: np.ndarray) -> None:
    """Header line of JSON, then row-major little-endian float32 payload."""
    arr32 = np.ascontiguousarray(arr, dtype="<f4")
    header = {"dims": list(arr32.shape), "dtype": "f32", "order": "row-major",
              "bands_last": True}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("ascii") + b"\n")
        fh.write(arr32.tobytes())


def read_raster(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            header_line = fh.readline()
            payload = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read raster {path}: {exc}") from exc
    try:
        header = json.loads(header_line.decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"bad raster header in {path}") from exc
    if header.get("dtype") != "f32":
        raise DataError(f"unsupported raster dtype {header.get('dtype')!r} in {path}")
    dims = tuple(int(d) for d in header["dims"])
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise DataError(f"raster {path}: payload {len(payload)} bytes, "
                        f"expected {expected} for dims {dims}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def write_metrics_csv(path, rows: list[dict]) -> None:
    """Per-scene metric rows plus a trailing mean row.

    Columns are exactly ``scene,psnr_db,ssim``; values are printed with full
    float precision so re-reading reproduces them bit-for-bit.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene", "psnr_db", "ssim"])
        for row in rows:
            writer.writerow([row["scene"], repr(float(row["psnr_db"])),
                             repr(float(row["ssim"]))])
        if rows:
            mean_psnr = float(np.mean([row["psnr_db"] for row in rows]))
            mean_ssim = float(np.mean([row["ssim"] for row in rows]))
            writer.writerow(["mean", repr(mean_psnr), repr(mean_ssim)])


def write_band_psnr_csv(path, rows: list[dict]) -> None:
    """Per-scene per-band PSNR: columns scene,band,psnr_db."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene", "band", "psnr_db"])
        for row in rows:
            for band, value in enumerate(row["band_psnr_db"]):
                writer.writerow([row["scene"], band, repr(float(value))])


def write_pgm(path, arr: np.ndarray) -> None:
    """8-bit binary PGM ("P5"), max-normalized; an all-zero array stays zero."""
    if arr.ndim != 2:
        raise DataError(f"PGM needs a 2-D array, got shape {arr.shape}")
    a = np.asarray(arr, dtype=np.float64)
    peak = a.max()
    scaled = np.zeros_like(a) if peak <= 0 else np.clip(a / peak, 0.0, 1.0)
    bytes8 = np.round(scaled * 255.0).astype(np.uint8)
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(bytes8.tobytes())


def read_pgm(path) -> np.ndarray:
    """Minimal P5 reader (used by tests)."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise DataError(f"{path} is not a binary PGM")
        w, h = (int(v) for v in fh.readline().split())
        maxval = int(fh.readline())
        if maxval != 255:
            raise DataError(f"unsupported PGM maxval {maxval}")
        payload = fh.read(w * h)
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def scene_paths(dataset_dir) -> list[Path]:
    """Sorted raster files of a dataset directory."""
    root = Path(dataset_dir)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    paths = sorted(root.glob(f"*{RASTER_SUFFIX}"))
    if not paths:
        raise DataError(f"no {RASTER_SUFFIX} files in {root}")
    return paths
