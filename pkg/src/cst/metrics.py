"""Reconstruction quality metrics and synthetic spectral scenes."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .rng import STREAM_SCENE, RandomStream

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(x: np.ndarray, ref: np.ndarray, data_range: float = 1.0) -> float:
    """Peak SNR in dB over all voxels, capped at 100 dB for (near-)equal inputs."""
    if x.shape != ref.shape:
        raise ShapeError(f"psnr: shapes differ, {x.shape} vs {ref.shape}")
    mse = float(np.mean((np.asarray(x, np.float64) - np.asarray(ref, np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(data_range * data_range / mse))


def psnr_per_band(x: np.ndarray, ref: np.ndarray, data_range: float = 1.0) -> list[float]:
    if x.shape != ref.shape or x.ndim != 3:
        raise ShapeError(f"psnr_per_band: need equal 3-D cubes, got {x.shape} vs {ref.shape}")
    return [psnr(x[:, :, n], ref[:, :, n], data_range) for n in range(x.shape[2])]


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g1 = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    win = np.outer(g1, g1)
    return win / win.sum()


def ssim(x: np.ndarray, ref: np.ndarray, data_range: float = 1.0) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5),
    evaluated on valid window positions only."""
    if x.shape != ref.shape or x.ndim != 2:
        raise ShapeError(f"ssim: need equal 2-D images, got {x.shape} vs {ref.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ShapeError(f"ssim: image {x.shape} smaller than the "
                         f"{SSIM_WINDOW}x{SSIM_WINDOW} window")
    a = np.asarray(x, np.float64)
    b = np.asarray(ref, np.float64)
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)

    def filt(img):
        patches = sliding_window_view(img, (SSIM_WINDOW, SSIM_WINDOW))
        return np.tensordot(patches, win, axes=([2, 3], [0, 1]))

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_cube(x: np.ndarray, ref: np.ndarray, data_range: float = 1.0) -> float:
    """Mean of per-band SSIM over a spectral cube."""
    if x.shape != ref.shape or x.ndim != 3:
        raise ShapeError(f"ssim_cube: need equal 3-D cubes, got {x.shape} vs {ref.shape}")
    return float(np.mean([ssim(x[:, :, n], ref[:, :, n], data_range)
                          for n in range(x.shape[2])]))


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

BACKGROUND_LEVEL = 0.01
BRIGHT_THRESHOLD = 0.1


def synth_scene(seed: int, h: int, w: int, bands: int,
                sparsity_profile: float) -> np.ndarray:
    """A dark cube with smooth bright blobs, each with its own spectral curve.

    ``sparsity_profile`` is the target fraction of pixels whose peak band
    value exceeds :data:`BRIGHT_THRESHOLD`; the generator lands within about
    +-20% of it. Deterministic per seed.
    """
    if not 0.0 <= sparsity_profile <= 0.8:
        raise ShapeError(f"sparsity_profile must be in [0, 0.8], got {sparsity_profile}")
    stream = RandomStream(seed, STREAM_SCENE)
    cube = np.full((h, w, bands), BACKGROUND_LEVEL, dtype=np.float64)
    if sparsity_profile <= 0.0:
        return cube
    yy, xx = np.mgrid[0:h, 0:w]
    target = sparsity_profile * h * w
    covered = np.zeros((h, w), dtype=bool)
    for _ in range(64):
        remaining = target - covered.sum()
        if remaining <= 0.15 * target:
            break
        amp = stream.uniform(low=0.5, high=1.0)
        # size the blob so its above-threshold footprint is ~ the remaining area
        r_cov = np.sqrt(max(remaining, 4.0) / np.pi)
        r_cov = min(r_cov, min(h, w) / 3.0) * stream.uniform(low=0.8, high=1.0)
        sigma = r_cov / np.sqrt(2.0 * np.log(amp / BRIGHT_THRESHOLD))
        cy = stream.uniform(low=0, high=h)
        cx = stream.uniform(low=0, high=w)
        center_band = stream.uniform(low=0, high=bands - 1)
        band_width = stream.uniform(low=bands / 4.0, high=bands)
        base = stream.uniform(low=0.2, high=0.6)
        n = np.arange(bands)
        curve = base + (1.0 - base) * np.exp(-((n - center_band) ** 2)
                                             / (2.0 * band_width ** 2))
        spatial = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2)
                               / (2.0 * sigma * sigma))
        cube += spatial[:, :, None] * curve[None, None, :]
        covered |= spatial * curve.max() > BRIGHT_THRESHOLD
    return np.clip(cube, 0.0, 1.0)


def quadrant_scene(seed: int, h: int, w: int, bands: int) -> np.ndarray:
    """One bright top-left quadrant over a dark background.

    Inside the quadrant the intensity varies smoothly around ~0.75 with a
    gentle spectral slope; outside it stays at the background level.
    """
    stream = RandomStream(seed, STREAM_SCENE)
    cube = np.full((h, w, bands), BACKGROUND_LEVEL, dtype=np.float64)
    qh, qw = h // 2, w // 2
    yy, xx = np.mgrid[0:qh, 0:qw]
    phase_y = stream.uniform(low=0, high=2 * np.pi)
    phase_x = stream.uniform(low=0, high=2 * np.pi)
    field = 0.75 + 0.2 * np.sin(2 * np.pi * yy / max(qh, 1) + phase_y) \
        * np.cos(2 * np.pi * xx / max(qw, 1) + phase_x)
    slope = stream.uniform(low=-0.3, high=0.3)
    n = np.arange(bands)
    curve = 1.0 + slope * (n / max(bands - 1, 1) - 0.5)
    cube[:qh, :qw, :] += field[:, :, None] * curve[None, None, :]
    return np.clip(cube, 0.0, 1.0)
