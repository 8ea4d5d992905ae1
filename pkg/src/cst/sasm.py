"""Spectra-aware screening: sparsity estimation, its supervision, and the
top-k patch selection that gates attention.

The estimator is a small U-shaped net producing both the shallow feature
map and a nonnegative per-pixel sparsity mask. The mask is average-pooled
per patch and the ``k = floor((1-sigma) * H*W / M^2)`` highest patches are
selected; coarser stages reuse the selection through 2x/4x pooling with a
>=0.5 binarization (exact ties select).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import Conv2d, ConvTranspose2d, Module
from .rng import RandomStream
from .tensor import Tensor


# ---------------------------------------------------------------------------
# patch selection
# ---------------------------------------------------------------------------

@dataclass
class BinaryPatchMask:
    """0/1 patch grid; ``grid[i, j]`` gates the MxM patch at (i, j)."""

    grid: np.ndarray
    k: int
    patch_size: int


def selection_count(h: int, w: int, patch: int, sigma: float) -> int:
    """k = floor((1-sigma) * H*W / M^2).

    The tiny nudge guards decimal sigmas (0.1, 0.3, ...) whose float product
    lands just below an exact integer.
    """
    n_patches = (h // patch) * (w // patch)
    return int(np.floor((1.0 - sigma) * n_patches + 1e-9))


def select_patches(ms: np.ndarray, patch: int, sigma: float) -> BinaryPatchMask:
    """Average-pool the sparsity mask per patch and keep the top-k patches.

    Ties break toward the smaller row-major patch index. ``sigma=1`` selects
    nothing; ``sigma=0`` selects everything.
    """
    ms = np.asarray(ms)
    if ms.ndim != 2:
        raise ShapeError(f"select_patches needs a 2-D mask, got {ms.shape}")
    h, w = ms.shape
    if h % patch or w % patch:
        raise ShapeError(f"mask {ms.shape} not divisible by patch size {patch}")
    if not 0.0 <= sigma <= 1.0:
        raise ShapeError(f"sigma must be in [0, 1], got {sigma}")
    gh, gw = h // patch, w // patch
    pooled = ms.reshape(gh, patch, gw, patch).mean(axis=(1, 3))
    k = selection_count(h, w, patch, sigma)
    order = np.argsort(-pooled.ravel(), kind="stable")
    grid = np.zeros(gh * gw, dtype=np.int8)
    grid[order[:k]] = 1
    return BinaryPatchMask(grid=grid.reshape(gh, gw), k=k, patch_size=patch)


def pool_mask_for_stage(mask: BinaryPatchMask, stage: int) -> BinaryPatchMask:
    """Downsample the patch grid 2^(stage-1)x for coarser pipeline stages.

    A pooled cell turns on when at least half of its source cells were on
    (exact 0.5 selects)."""
    if stage < 1:
        raise ShapeError(f"stage index must be >= 1, got {stage}")
    factor = 2 ** (stage - 1)
    if factor == 1:
        return BinaryPatchMask(mask.grid.copy(), int(mask.grid.sum()), mask.patch_size)
    gh, gw = mask.grid.shape
    if gh % factor or gw % factor:
        raise ShapeError(f"grid {mask.grid.shape} not divisible by {factor} at "
                         f"stage {stage}")
    pooled = mask.grid.astype(np.float64).reshape(
        gh // factor, factor, gw // factor, factor).mean(axis=(1, 3))
    grid = (pooled >= 0.5).astype(np.int8)
    return BinaryPatchMask(grid=grid, k=int(grid.sum()), patch_size=mask.patch_size)


# ---------------------------------------------------------------------------
# supervision
# ---------------------------------------------------------------------------

def reference_mask(x_rec, x_gt) -> np.ndarray:
    """Band-averaged absolute reconstruction error; the (detached) target the
    sparsity mask is trained toward."""
    a = x_rec.data if isinstance(x_rec, Tensor) else np.asarray(x_rec)
    b = x_gt.data if isinstance(x_gt, Tensor) else np.asarray(x_gt)
    if a.shape != b.shape or a.ndim != 3:
        raise ShapeError(f"reference_mask: need equal cubes, got {a.shape} vs {b.shape}")
    return np.abs(a - b).mean(axis=2)


def sparsity_loss(m_pred: Tensor, m_ref: np.ndarray) -> Tensor:
    """Mean squared error between predicted and reference sparsity masks."""
    ref = Tensor(np.asarray(m_ref), dtype=m_pred.dtype)
    if ref.shape != m_pred.shape:
        raise ShapeError(f"sparsity_loss: {m_pred.shape} vs {ref.shape}")
    diff = m_pred - ref
    return (diff * diff).mean()


def reconstruction_loss(x_rec: Tensor, x_gt: np.ndarray) -> Tensor:
    """Mean squared error over all voxels of the cube."""
    gt = Tensor(np.asarray(x_gt), dtype=x_rec.dtype)
    if gt.shape != x_rec.shape:
        raise ShapeError(f"reconstruction_loss: {x_rec.shape} vs {gt.shape}")
    diff = x_rec - gt
    return (diff * diff).mean()


def total_loss(x_rec: Tensor, x_gt: np.ndarray, m_pred: Tensor,
               m_ref: np.ndarray, weight: float = 2.0) -> Tensor:
    """Reconstruction MSE plus ``weight`` times the sparsity-mask MSE."""
    return reconstruction_loss(x_rec, x_gt) + weight * sparsity_loss(m_pred, m_ref)


# ---------------------------------------------------------------------------
# sparsity estimator
# ---------------------------------------------------------------------------

class SparsityEstimator(Module):
    """U-shaped estimator: two downsampling stages, dilated context block,
    two upsampling stages, and a C+1-channel head (features + mask).

    Channel plan: in -> C -> 2C (half res) -> 4C (quarter res) -> 2C -> C+1.
    """

    def __init__(self, in_channels: int, channels: int, stream: RandomStream):
        c = channels
        self.channels = c
        # encoder stage 1: point convs then strided depthwise
        self.e1_pw1 = Conv2d(in_channels, c, 1, stream)
        self.e1_pw2 = Conv2d(c, 2 * c, 1, stream)
        self.e1_dw = Conv2d(2 * c, 2 * c, 3, stream, stride=2, padding=1, groups=2 * c)
        # encoder stage 2
        self.e2_pw1 = Conv2d(2 * c, 2 * c, 1, stream)
        self.e2_pw2 = Conv2d(2 * c, 4 * c, 1, stream)
        self.e2_dw = Conv2d(4 * c, 4 * c, 3, stream, stride=2, padding=1, groups=4 * c)
        # dilated context (rates 1/2/4) fused by a point conv
        self.ctx_d1 = Conv2d(4 * c, 4 * c, 3, stream, padding=1, dilation=1, groups=4 * c)
        self.ctx_d2 = Conv2d(4 * c, 4 * c, 3, stream, padding=2, dilation=2, groups=4 * c)
        self.ctx_d4 = Conv2d(4 * c, 4 * c, 3, stream, padding=4, dilation=4, groups=4 * c)
        self.ctx_fuse = Conv2d(12 * c, 4 * c, 1, stream)
        # decoder stage 1
        self.d1_up = ConvTranspose2d(4 * c, 2 * c, 2, stream, stride=2)
        self.d1_pw1 = Conv2d(2 * c, 2 * c, 1, stream)
        self.d1_dw = Conv2d(2 * c, 2 * c, 3, stream, padding=1, groups=2 * c)
        self.d1_pw2 = Conv2d(2 * c, 2 * c, 1, stream)
        # decoder stage 2; the last point conv doubles as the C+1 head.
        # Small head init keeps the initial mask (and so the sparsity loss)
        # near zero instead of swamping the reconstruction loss.
        self.d2_up = ConvTranspose2d(2 * c, c, 2, stream, stride=2)
        self.d2_pw1 = Conv2d(c, c, 1, stream)
        self.d2_dw = Conv2d(c, c, 3, stream, padding=1, groups=c)
        self.head = Conv2d(c, c + 1, 1, stream, init_scale=0.05)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (shallow feature (H,W,C), sparsity mask (H,W))."""
        h, w = x.shape[0], x.shape[1]
        if h % 4 or w % 4:
            raise ShapeError(f"estimator needs H,W divisible by 4, got {(h, w)}")
        z = self.e1_dw(self.e1_pw2(T.gelu(self.e1_pw1(x))))
        z = self.e2_dw(self.e2_pw2(T.gelu(self.e2_pw1(z))))
        ctx = T.concat([self.ctx_d1(z), self.ctx_d2(z), self.ctx_d4(z)], axis=2)
        z = T.gelu(self.ctx_fuse(ctx))
        z = self.d1_pw2(self.d1_dw(T.gelu(self.d1_pw1(self.d1_up(z)))))
        z = self.head(self.d2_dw(T.gelu(self.d2_pw1(self.d2_up(z)))))
        c = self.channels
        x0 = T.gather(z, np.arange(c), axis=2)
        ms = T.relu(T.reshape(T.gather(z, np.array([c]), axis=2), (h, w)))
        return x0, ms
