"""CASSI physical forward model and its inverse-shear initialization.

A spectral cube ``(H, W, B)`` is modulated by a coded aperture, sheared along
the width axis by ``d`` pixels per band (band 0 is the unsheared anchor), and
integrated over bands into a single 2-D measurement of width
``W + d*(B - 1)``. ``shift_back`` undoes the shear to build the network's
initial estimate. All functions are pure numpy; nothing here participates in
autodiff (measurements are data, not parameters).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .rng import RandomStream


@dataclass
class CodedAperture:
    """Physical mask. ``mask2d`` is (H, W) in [0, 1]."""

    mask2d: np.ndarray

    def mask3d(self, bands: int) -> np.ndarray:
        """The mask replicated along a new trailing band axis."""
        return np.repeat(self.mask2d[:, :, None], bands, axis=2)


def random_mask(h: int, w: int, stream: RandomStream) -> CodedAperture:
    """I.i.d. Bernoulli(0.5) binary mask."""
    return CodedAperture(stream.bernoulli((h, w)))


def modulate(cube: np.ndarray, mask: CodedAperture | np.ndarray) -> np.ndarray:
    """Per-band elementwise product with the 2-D mask."""
    mask2d = mask.mask2d if isinstance(mask, CodedAperture) else mask
    if cube.ndim != 3 or mask2d.shape != cube.shape[:2]:
        raise ShapeError(f"modulate: cube {cube.shape} vs mask {mask2d.shape}")
    return cube * mask2d[:, :, None]


def disperse(cube: np.ndarray, d: int) -> np.ndarray:
    """Shear: band ``n`` lands at column offset ``d*n``; elsewhere zero."""
    if d < 0:
        raise ShapeError(f"shift step must be >= 0, got {d}")
    h, w, bands = cube.shape
    out = np.zeros((h, w + d * (bands - 1), bands), dtype=cube.dtype)
    for n in range(bands):
        out[:, d * n: d * n + w, n] = cube[:, :, n]
    return out


def integrate(sheared: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray:
    """Sum over bands, plus an optional additive noise field."""
    y = sheared.sum(axis=2)
    if noise is not None:
        if noise.shape != y.shape:
            raise ShapeError(f"integrate: noise {noise.shape} vs measurement {y.shape}")
        y = y + noise
    return y


def shot_noise_11bit(y: np.ndarray, stream: RandomStream) -> np.ndarray:
    """Poisson photon noise at an 11-bit full scale.

    The measurement is scaled so its max maps to 2^11 - 1 counts, sampled
    per pixel, and rescaled back. Zero input stays exactly zero.
    """
    if np.any(y < 0):
        raise DataError("shot noise needs a nonnegative measurement")
    peak = float(y.max())
    if peak == 0.0:
        return np.zeros_like(y)
    scale = (2 ** 11 - 1) / peak
    counts = stream.poisson(y * scale)
    return (counts / scale).astype(y.dtype)


def forward_measure(cube: np.ndarray, mask: CodedAperture | np.ndarray, d: int,
                    noise: str = "none",
                    noise_stream: RandomStream | None = None) -> np.ndarray:
    """Full optical chain: modulate -> disperse -> integrate (-> shot noise)."""
    y = integrate(disperse(modulate(cube, mask), d))
    if noise == "none" or noise is None:
        return y
    if noise == "shot11":
        if noise_stream is None:
            raise DataError("shot11 noise needs an explicit random stream")
        return shot_noise_11bit(y, noise_stream)
    raise DataError(f"unknown noise model '{noise}'")


def shift_back(y: np.ndarray, d: int, bands: int) -> np.ndarray:
    """Inverse shear: ``out[:, :, n] = y[:, d*n : d*n + W]`` with
    ``W = width - d*(bands-1)``."""
    if y.ndim != 2:
        raise ShapeError(f"shift_back needs a 2-D measurement, got {y.shape}")
    w = y.shape[1] - d * (bands - 1)
    if w <= 0:
        raise DataError(
            f"measurement width {y.shape[1]} inconsistent with d={d}, bands={bands}")
    out = np.empty((y.shape[0], w, bands), dtype=y.dtype)
    for n in range(bands):
        out[:, :, n] = y[:, d * n: d * n + w]
    return out


def measurement_width(w: int, d: int, bands: int) -> int:
    return w + d * (bands - 1)
