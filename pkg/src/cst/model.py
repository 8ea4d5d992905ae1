"""The full reconstruction network and its accounting.

Pipeline: shift-back initialization, concat with the replicated mask, a 1x1
stem conv, the sparsity estimator (features + mask), top-k patch selection,
then a three-stage symmetric encoder-decoder of hash-attention blocks with
4x4/stride-2 downsampling, 2x2/stride-2 upsampling and additive skips, and a
zero-initialized 3x3 head producing a residual added back onto the stem
feature. Channel widths double per stage (C, 2C, 4C) and the per-head
dimension stays at C, so stages run 1, 2 and 4 heads.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .hashattn import GatingPlan, SahMsa
from .nn import Conv2d, ConvTranspose2d, LayerNorm, Module
from .optics import shift_back
from .rng import STREAM_INIT, RandomStream
from .sasm import (BinaryPatchMask, SparsityEstimator, pool_mask_for_stage,
                   select_patches, selection_count)
from .tensor import Tensor

CHECKPOINT_MAGIC = b"CSTCKPT1\n"


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class CstConfig:
    """Architecture hyperparameters; defaults follow the reference operating
    point (sigma 0.5, two hash rounds, 16x16 patches, buckets of 64)."""

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

    def __post_init__(self):
        self.blocks = tuple(int(b) for b in self.blocks)
        if len(self.blocks) != 3 or any(b < 1 for b in self.blocks):
            raise ConfigError(f"blocks must be three positive counts, got {self.blocks}")
        n_tokens = self.patch_size * self.patch_size
        if n_tokens % self.bucket_size:
            raise ConfigError(f"bucket size {self.bucket_size} must divide "
                              f"patch token count {n_tokens}")
        if not 0.0 <= self.sigma <= 1.0:
            raise ConfigError(f"sigma must be in [0, 1], got {self.sigma}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.shift_step < 0:
            raise ConfigError(f"shift step must be >= 0, got {self.shift_step}")
        if self.weight_mode not in ("literal", "logit_mass"):
            raise ConfigError(f"unknown weight_mode '{self.weight_mode}'")

    def stage_channels(self, stage: int) -> int:
        return self.channels * 2 ** (stage - 1)

    def validate_geometry(self, h: int, w: int) -> None:
        step = 4 * self.patch_size
        if h % step or w % step:
            raise DataError(f"spatial dims {(h, w)} must be divisible by "
                            f"4*patch_size={step}")


def cst_s() -> CstConfig:
    return CstConfig(blocks=(1, 1, 2))


def cst_m() -> CstConfig:
    return CstConfig(blocks=(2, 2, 2))


def cst_l() -> CstConfig:
    return CstConfig(blocks=(2, 4, 6))


def cst_l_star() -> CstConfig:
    return replace(cst_l(), sigma=0.0)


def cst_micro() -> CstConfig:
    """Desk-scale preset: 4 bands, tiny channels, 8x8 patches, buckets of 16."""
    return CstConfig(blocks=(1, 1, 1), channels=4, bands=4, patch_size=8,
                     bucket_size=16)


PRESETS = {
    "cst-s": cst_s,
    "cst-m": cst_m,
    "cst-l": cst_l,
    "cst-l*": cst_l_star,
    "cst-micro": cst_micro,
}


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

class FeedForward(Module):
    """1x1 expand (4x) -> GELU -> depthwise 3x3 -> GELU -> 1x1 project."""

    def __init__(self, channels: int, stream: RandomStream):
        hidden = 4 * channels
        self.expand = Conv2d(channels, hidden, 1, stream)
        self.dw = Conv2d(hidden, hidden, 3, stream, padding=1, groups=hidden)
        self.project = Conv2d(hidden, channels, 1, stream)

    def __call__(self, x: Tensor) -> Tensor:
        return self.project(T.gelu(self.dw(T.gelu(self.expand(x)))))


class Sahab(Module):
    """Pre-norm residual block: x + attn(LN(x)), then + FFN(LN(.))."""

    def __init__(self, channels: int, cfg: CstConfig, stream: RandomStream,
                 name: str, resample_stream: RandomStream | None = None):
        self.ln1 = LayerNorm(channels)
        self.attn = SahMsa(channels, cfg.channels, cfg.patch_size,
                           cfg.bucket_size, cfg.rounds, cfg.hash_r, stream,
                           name=name, weight_mode=cfg.weight_mode,
                           resample_stream=resample_stream)
        self.ln2 = LayerNorm(channels)
        self.ffn = FeedForward(channels, stream)

    def __call__(self, x: Tensor, mask: BinaryPatchMask,
                 plan: GatingPlan | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask, plan)
        return x + self.ffn(self.ln2(x))


class CstModel(Module):
    def __init__(self, cfg: CstConfig, seed: int = 0):
        self.cfg = cfg
        stream = RandomStream(seed, STREAM_INIT)
        c, bands = cfg.channels, cfg.bands
        n1, n2, n3 = cfg.blocks

        def resample(idx: int):
            if not cfg.resample_hash:
                return None
            return RandomStream(seed, 1000 + idx)

        counter = iter(range(1000))

        def blocks(n: int, ch: int, tag: str) -> list[Sahab]:
            return [Sahab(ch, cfg, stream, name=f"{tag}.{i}.attn",
                          resample_stream=resample(next(counter)))
                    for i in range(n)]

        self.stem = Conv2d(2 * bands, bands, 1, stream)
        self.estimator = SparsityEstimator(bands, c, stream)
        self.enc1 = blocks(n1, c, "enc1")
        self.down1 = Conv2d(c, 2 * c, 4, stream, stride=2, padding=1)
        self.enc2 = blocks(n2, 2 * c, "enc2")
        self.down2 = Conv2d(2 * c, 4 * c, 4, stream, stride=2, padding=1)
        self.mid = blocks(n3, 4 * c, "mid")
        self.up1 = ConvTranspose2d(4 * c, 2 * c, 2, stream, stride=2)
        self.dec2 = blocks(n2, 2 * c, "dec2")
        self.up2 = ConvTranspose2d(2 * c, c, 2, stream, stride=2)
        self.dec1 = blocks(n1, c, "dec1")
        # zero init: the untrained model reconstructs exactly the stem feature
        self.final = Conv2d(c, bands, 3, stream, padding=1, zero_init=True)

    def forward(self, y: np.ndarray, mask2d: np.ndarray,
                plan: GatingPlan | None = None, sigma: float | None = None):
        """Reconstruct from a measurement.

        Returns ``(x_rec (H,W,bands), m_s (H,W), info)`` where ``info`` holds
        the patch selection and the per-stage gating masks.
        """
        cfg = self.cfg
        h0 = shift_back(np.asarray(y, dtype=np.float64), cfg.shift_step, cfg.bands)
        h, w = h0.shape[:2]
        cfg.validate_geometry(h, w)
        if mask2d.shape != (h, w):
            raise DataError(f"mask {mask2d.shape} does not match scene {(h, w)}")
        mask3d = np.repeat(np.asarray(mask2d, dtype=np.float64)[:, :, None],
                           cfg.bands, axis=2)
        dt = T.get_default_dtype()
        stacked = T.concat([Tensor(h0, dtype=dt), Tensor(mask3d, dtype=dt)], axis=2)

        x = self.stem(stacked)
        x0, ms = self.estimator(x)

        sig = cfg.sigma if sigma is None else float(sigma)

        def compute_selection():
            return select_patches(ms.data, cfg.patch_size, sig)

        if plan is None:
            selection = compute_selection()
        else:
            selection = plan.resolve("selection", compute_selection)
        stage_masks = {i: pool_mask_for_stage(selection, i) for i in (1, 2, 3)}

        z = x0
        for blk in self.enc1:
            z = blk(z, stage_masks[1], plan)
        e1 = z
        z = self.down1(z)
        for blk in self.enc2:
            z = blk(z, stage_masks[2], plan)
        e2 = z
        z = self.down2(z)
        for blk in self.mid:
            z = blk(z, stage_masks[3], plan)
        z = self.up1(z) + e2
        for blk in self.dec2:
            z = blk(z, stage_masks[2], plan)
        z = self.up2(z) + e1
        for blk in self.dec1:
            z = blk(z, stage_masks[1], plan)
        residual = self.final(z)
        x_rec = x + residual

        info = {"selection": selection, "stage_masks": stage_masks,
                "stem_feature": x}
        return x_rec, ms, info


# ---------------------------------------------------------------------------
# params / FLOPs accounting
# ---------------------------------------------------------------------------

def count_params(cfg: CstConfig) -> int:
    """Exact learnable-scalar count (independent of input geometry)."""
    return CstModel(cfg, seed=0).num_params()


@dataclass
class FlopReport:
    attention: float = 0.0
    other: float = 0.0
    per_stage_attention: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.attention + self.other


def _conv_flops(ho, wo, cout, cin_per_group, kh, kw) -> float:
    return 2.0 * ho * wo * cout * cin_per_group * kh * kw


def nominal_selected_counts(cfg: CstConfig, h: int, w: int,
                            sigma: float | None = None) -> dict[int, int]:
    """Per-stage selected-patch budgets implied by the sparsity ratio.

    Applies ``k_i = floor((1 - sigma) * n_patches_i)`` at each stage's own
    grid; this is the data-free accounting the benchmark uses."""
    sig = cfg.sigma if sigma is None else float(sigma)
    counts = {}
    for stage in (1, 2, 3):
        hs, ws = h >> (stage - 1), w >> (stage - 1)
        counts[stage] = selection_count(hs, ws, cfg.patch_size, sig)
    return counts


def attention_flops_per_patch(cfg: CstConfig, stage: int) -> float:
    """One block's attention cost for a single selected patch: q/k/v and
    output projections plus the per-round bucketed score/mix matmuls."""
    c_s = cfg.stage_channels(stage)
    n = cfg.patch_size * cfg.patch_size
    proj = 6.0 * n * c_s * c_s          # q, k, v over all heads
    out_proj = 2.0 * n * c_s * c_s
    rounds = 4.0 * cfg.rounds * n * cfg.bucket_size * c_s  # scores + value mix
    return proj + out_proj + rounds


def _ffn_flops(hs, ws, c_s) -> float:
    hidden = 4 * c_s
    return (_conv_flops(hs, ws, hidden, c_s, 1, 1)
            + _conv_flops(hs, ws, hidden, 1, 3, 3)
            + _conv_flops(hs, ws, c_s, hidden, 1, 1))


def _estimator_flops(cfg: CstConfig, h, w) -> float:
    c, bands = cfg.channels, cfg.bands
    h2, w2, h4, w4 = h // 2, w // 2, h // 4, w // 4
    total = _conv_flops(h, w, c, bands, 1, 1)
    total += _conv_flops(h, w, 2 * c, c, 1, 1)
    total += _conv_flops(h2, w2, 2 * c, 1, 3, 3)
    total += _conv_flops(h2, w2, 2 * c, 2 * c, 1, 1)
    total += _conv_flops(h2, w2, 4 * c, 2 * c, 1, 1)
    total += _conv_flops(h4, w4, 4 * c, 1, 3, 3)
    total += 3 * _conv_flops(h4, w4, 4 * c, 1, 3, 3)
    total += _conv_flops(h4, w4, 4 * c, 12 * c, 1, 1)
    total += _conv_flops(h4, w4, 2 * c, 4 * c, 2, 2)  # deconv counted at input res
    total += _conv_flops(h2, w2, 2 * c, 2 * c, 1, 1)
    total += _conv_flops(h2, w2, 2 * c, 1, 3, 3)
    total += _conv_flops(h2, w2, 2 * c, 2 * c, 1, 1)
    total += _conv_flops(h2, w2, c, 2 * c, 2, 2)
    total += _conv_flops(h, w, c, c, 1, 1)
    total += _conv_flops(h, w, c, 1, 3, 3)
    total += _conv_flops(h, w, c + 1, c, 1, 1)
    return total


def count_flops(cfg: CstConfig, h: int, w: int,
                selected: dict[int, int] | None = None,
                sigma: float | None = None) -> FlopReport:
    """Analytic multiply-accumulate count (x2) of one forward pass.

    ``selected`` gives the per-stage selected-patch counts; by default the
    nominal budgets from :func:`nominal_selected_counts` are used. Attention
    cost is linear in the selected counts; everything else is
    sparsity-invariant. Elementwise work (norms, activations) is not counted.
    """
    cfg.validate_geometry(h, w)
    if selected is None:
        selected = nominal_selected_counts(cfg, h, w, sigma)
    c, bands = cfg.channels, cfg.bands
    n1, n2, n3 = cfg.blocks
    report = FlopReport()

    report.other += _conv_flops(h, w, bands, 2 * bands, 1, 1)  # stem
    report.other += _estimator_flops(cfg, h, w)
    report.other += _conv_flops(h, w, bands, c, 3, 3)          # residual head

    report.other += _conv_flops(h // 2, w // 2, 2 * c, c, 4, 4)        # down1
    report.other += _conv_flops(h // 4, w // 4, 4 * c, 2 * c, 4, 4)    # down2
    report.other += _conv_flops(h // 4, w // 4, 2 * c, 4 * c, 2, 2)    # up1
    report.other += _conv_flops(h // 2, w // 2, c, 2 * c, 2, 2)        # up2

    # attention stages run encoder, bottleneck, decoder: 1,2,3,2,1
    for stage, n_blocks in ((1, n1), (2, n2), (3, n3), (2, n2), (1, n1)):
        hs, ws = h >> (stage - 1), w >> (stage - 1)
        c_s = cfg.stage_channels(stage)
        att = n_blocks * selected[stage] * attention_flops_per_patch(cfg, stage)
        report.attention += att
        report.per_stage_attention[stage] = (
            report.per_stage_attention.get(stage, 0.0) + att)
        report.other += n_blocks * _ffn_flops(hs, ws, c_s)
    return report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: CstModel, extra: dict | None = None) -> None:
    named = list(model.named_params())
    header = {
        "config": asdict(model.cfg) | {"blocks": list(model.cfg.blocks)},
        "params": [[name, list(p.shape)] for name, p in named],
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header).encode("ascii") + b"\n")
        for _, p in named:
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[CstModel, dict]:
    """Rebuild the model a checkpoint describes. Returns (model, extra)."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise DataError(f"{path} is not a checkpoint (bad magic)")
            header = json.loads(fh.readline().decode("ascii"))
            payload = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    cfg_dict = dict(header["config"])
    cfg_dict["blocks"] = tuple(cfg_dict["blocks"])
    cfg = CstConfig(**cfg_dict)
    model = CstModel(cfg, seed=0)
    named = dict(model.named_params())
    offset = 0
    dt = T.get_default_dtype()
    for name, shape in header["params"]:
        if name not in named:
            raise DataError(f"checkpoint parameter '{name}' unknown to this model")
        count = int(np.prod(shape))
        raw = payload[offset * 4:(offset + count) * 4]
        if len(raw) != count * 4:
            raise DataError(f"checkpoint {path} truncated at parameter '{name}'")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
        if tuple(named[name].shape) != tuple(shape):
            raise DataError(f"parameter '{name}' shape {shape} does not match "
                            f"model shape {named[name].shape}")
        named[name].data = arr.astype(dt)
        offset += count
    if offset * 4 != len(payload):
        raise DataError(f"checkpoint {path} has {len(payload) - offset * 4} "
                        f"trailing payload bytes")
    return model, header.get("extra", {})
