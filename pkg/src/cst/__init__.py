"""Coarse-to-fine sparse Transformer for snapshot compressive spectral imaging.

Subsystems:

* :mod:`cst.tensor` / :mod:`cst.nn` / :mod:`cst.optim` — numpy-backed autodiff
  engine, layers, Adam + cosine schedule;
* :mod:`cst.optics` — the coded-aperture forward model and shift-back;
* :mod:`cst.sasm` — sparsity estimator, its losses and top-k patch selection;
* :mod:`cst.hashattn` — hash-bucketed multi-head attention;
* :mod:`cst.model` — the full encoder-decoder, presets, FLOPs/params counts,
  checkpoints;
* :mod:`cst.metrics` / :mod:`cst.formats` — PSNR/SSIM, synthetic scenes,
  raster/CSV/PGM files;
* :mod:`cst.train` / :mod:`cst.cli` — training loop, evaluation and the CLI.
"""

from .errors import (ConfigError, CstError, DataError, DeterminismError,
                     GraphError, NumericError, ShapeError)
from .model import (CstConfig, CstModel, PRESETS, count_flops, count_params,
                    cst_l, cst_l_star, cst_m, cst_micro, cst_s,
                    load_checkpoint, save_checkpoint)
from .tensor import Tensor, backward, grad_check, no_grad

__all__ = [
    "ConfigError", "CstError", "DataError", "DeterminismError", "GraphError",
    "NumericError", "ShapeError",
    "CstConfig", "CstModel", "PRESETS", "count_flops", "count_params",
    "cst_l", "cst_l_star", "cst_m", "cst_micro", "cst_s",
    "load_checkpoint", "save_checkpoint",
    "Tensor", "backward", "grad_check", "no_grad",
]
