"""Hash-bucketed multi-head self-attention over selected patches.

Tokens inside each MxM patch are mapped to integer codes by a random
projection hash ``floor((a.x + b) / r)``, sorted (stable) by code, and split
into equal buckets of ``m`` tokens; scaled-dot-product attention runs only
inside each bucket. Several independent hash rounds run in parallel and
their per-head outputs are combined with weights given by each round's
attention mass for the query (with softmax normalization that mass is one
per round, so the literal weights are uniform; an alternative mode scores
rounds by their unnormalized logit mass instead).

Bucket membership is a non-differentiable constant of the forward pass:
gradients flow through attention values only, never through the sort or the
floor. A :class:`GatingPlan` can record the selection and permutations of
one forward pass and replay them, which pins the gating for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, GraphError, NumericError, ShapeError
from .nn import Module
from .rng import RandomStream
from .sasm import BinaryPatchMask
from .tensor import Tensor


# ---------------------------------------------------------------------------
# hashing and bucketing
# ---------------------------------------------------------------------------

@dataclass
class HashParams:
    """Per-round projection vectors ``a`` (rounds, C), offsets ``b`` (rounds,)
    and the code width ``r``. Drawn once at layer construction."""

    a: np.ndarray
    b: np.ndarray
    r: float

    @property
    def rounds(self) -> int:
        return self.a.shape[0]


def draw_hash_params(rounds: int, channels: int, r: float,
                     stream: RandomStream) -> HashParams:
    if r <= 0:
        raise ConfigError(f"hash width r must be positive, got {r}")
    a = stream.normal((rounds, channels))
    b = stream.uniform((rounds,), low=0.0, high=r)
    return HashParams(a=a, b=b, r=float(r))


def hash_codes(tokens: np.ndarray, a: np.ndarray, b: float, r: float) -> np.ndarray:
    """Integer codes ``floor((tokens @ a + b) / r)`` (floor toward -inf).

    ``tokens`` is (N, C) or batched (..., N, C)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if not np.all(np.isfinite(tokens)):
        raise NumericError("hash_codes got non-finite tokens")
    proj = tokens @ np.asarray(a, dtype=np.float64) + b
    return np.floor(proj / r).astype(np.int64)


@dataclass
class BucketAssignment:
    """Stable sort order of one hash round. ``perm[i]`` is the original index
    of the i-th token in sorted-code order; bucket ``i`` covers sorted
    positions ``[i*m, (i+1)*m)``."""

    perm: np.ndarray
    bucket_size: int

    @property
    def n_buckets(self) -> int:
        return self.perm.size // self.bucket_size


def bucketize(codes: np.ndarray, m: int) -> BucketAssignment:
    codes = np.asarray(codes)
    n = codes.shape[-1]
    if n % m:
        raise ConfigError(f"token count {n} not divisible by bucket size {m}")
    perm = np.argsort(codes, axis=-1, kind="stable")
    return BucketAssignment(perm=perm, bucket_size=int(m))


def write_assignment_csv(path, assignment: BucketAssignment) -> None:
    """Debug dump: one row per token, columns sorted_pos,bucket,original_index."""
    with open(path, "w") as fh:
        fh.write("sorted_pos,bucket,original_index\n")
        for pos, orig in enumerate(assignment.perm.ravel()):
            fh.write(f"{pos},{pos // assignment.bucket_size},{int(orig)}\n")


# ---------------------------------------------------------------------------
# gating plan (record/replay of non-differentiable choices)
# ---------------------------------------------------------------------------

class GatingPlan:
    """Records the data-dependent gating of one forward pass (patch selection
    and per-round token permutations) so later passes can replay it."""

    def __init__(self):
        self.entries: dict = {}
        self.recording = True

    def freeze(self) -> "GatingPlan":
        self.recording = False
        return self

    def resolve(self, key: str, compute):
        if key in self.entries:
            return self.entries[key]
        if not self.recording:
            raise GraphError(f"gating plan has no entry '{key}' and is frozen")
        value = compute()
        self.entries[key] = value
        return value


# ---------------------------------------------------------------------------
# attention core
# ---------------------------------------------------------------------------

class AttentionParams(Module):
    """Per-head projections: query/key maps ``u, v`` (heads, d, C), value map
    ``wp`` (heads, d, C) and output map ``wo`` (heads, C, d)."""

    def __init__(self, channels: int, head_dim: int, stream: RandomStream):
        if channels % head_dim:
            raise ConfigError(f"head dim {head_dim} must divide channels {channels}")
        self.n_heads = channels // head_dim
        self.head_dim = head_dim
        self.channels = channels
        sc = 1.0 / np.sqrt(channels)
        sd = 1.0 / np.sqrt(head_dim)
        shape = (self.n_heads, head_dim, channels)
        self.u = Tensor(stream.normal(shape) * sc, requires_grad=True,
                        dtype=T.get_default_dtype())
        self.v = Tensor(stream.normal(shape) * sc, requires_grad=True,
                        dtype=T.get_default_dtype())
        self.wp = Tensor(stream.normal(shape) * sc, requires_grad=True,
                         dtype=T.get_default_dtype())
        self.wo = Tensor(stream.normal((self.n_heads, channels, head_dim)) * sd,
                         requires_grad=True, dtype=T.get_default_dtype())

    def head_matrix(self, stacked: Tensor, head: int) -> Tensor:
        rows = T.gather(stacked, np.array([head]), axis=0)
        return T.reshape(rows, stacked.shape[1:])


def _project(tokens_flat: Tensor, mat: Tensor) -> Tensor:
    """(P*N, C) x (d, C)^T -> (P*N, d)."""
    return T.matmul(tokens_flat, T.permute(mat, (1, 0)))


def _row_stochastic_tol(dtype) -> float:
    return 1e-10 if dtype == np.float64 else 1e-4


def _bucketed_round(q: Tensor, k: Tensor, v: Tensor, perm: np.ndarray,
                    m: int, need_lse: bool):
    """One hash round of bucketed attention for one head.

    ``q, k, v``: (P, N, d) tensors in original token order; ``perm``: (P, N).
    Returns (out (P,N,d), attn_mass (P,N) ndarray, lse (P,N) tensor or None),
    all in original token order.
    """
    p, n, d = q.shape
    if n % m:
        raise ConfigError(f"token count {n} not divisible by bucket size {m}")
    nb = n // m
    inv = np.argsort(perm, axis=1)
    qs = T.reshape(T.batched_gather(q, perm), (p * nb, m, d))
    ks = T.reshape(T.batched_gather(k, perm), (p * nb, m, d))
    vs = T.reshape(T.batched_gather(v, perm), (p * nb, m, d))
    logits = T.matmul(qs, T.permute(ks, (0, 2, 1))) * (1.0 / float(np.sqrt(d)))
    att = T.softmax(logits, axis=-1)

    mass_sorted = att.data.sum(axis=-1).reshape(p, n)
    tol = _row_stochastic_tol(att.dtype)
    if np.any(np.abs(mass_sorted - 1.0) > tol):
        raise NumericError("attention rows lost stochasticity")
    mass = np.take_along_axis(mass_sorted, inv, axis=1)

    out_sorted = T.reshape(T.matmul(att, vs), (p, n, d))
    out = T.batched_gather(out_sorted, inv)

    lse = None
    if need_lse:
        mx = logits.data.max(axis=-1, keepdims=True)
        shifted = logits - Tensor(np.broadcast_to(mx, logits.shape).copy(),
                                  dtype=logits.dtype)
        summed = T.tsum(T.texp(shifted), axis=-1)
        lse = T.tlog(summed) + Tensor(mx[..., 0].copy(), dtype=logits.dtype)
        lse = T.batched_gather(T.reshape(lse, (p, n)), inv)
    return out, mass, lse


def _combine_rounds(round_outs: list[Tensor], masses: list[np.ndarray],
                    lses: list, weight_mode: str) -> Tensor:
    """Mix per-round head outputs with per-(query) round weights."""
    if weight_mode == "literal":
        total = np.sum(masses, axis=0)
        if np.any(total <= 0):
            raise NumericError("round weights hit a zero denominator")
        combined = None
        for out, mass in zip(round_outs, masses):
            term = T.rowscale(out, mass / total)
            combined = term if combined is None else combined + term
        return combined
    if weight_mode == "logit_mass":
        stacked = T.concat([T.reshape(l, (*l.shape, 1)) for l in lses], axis=2)
        weights = T.softmax(stacked, axis=2)
        combined = None
        for ridx, out in enumerate(round_outs):
            w_r = T.reshape(T.gather(weights, np.array([ridx]), axis=2),
                            out.shape[:2])
            term = T.rowscale(out, w_r)
            combined = term if combined is None else combined + term
        return combined
    raise ConfigError(f"unknown weight_mode '{weight_mode}'")


def bucket_attention(tokens: Tensor, assignment: BucketAssignment,
                     params: AttentionParams):
    """Single-round bucketed attention for one patch of ``(N, C)`` tokens.

    Returns (per-head outputs, attention mass): a list of ``(N, head_dim)``
    tensors in original token order (before the output projection), and an
    ``(n_heads, N)`` array of per-query attention mass for the round-weight
    computation.
    """
    tokens = T.as_tensor(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != params.channels:
        raise ShapeError(f"bucket_attention needs (N, {params.channels}) tokens, "
                         f"got {tokens.shape}")
    n = tokens.shape[0]
    if assignment.perm.size != n:
        raise ShapeError(f"assignment covers {assignment.perm.size} tokens, "
                         f"got {n}")
    perm = assignment.perm.reshape(1, n)
    flat = tokens
    heads, masses = [], []
    for h in range(params.n_heads):
        q = T.reshape(_project(flat, params.head_matrix(params.u, h)), (1, n, -1))
        k = T.reshape(_project(flat, params.head_matrix(params.v, h)), (1, n, -1))
        v = T.reshape(_project(flat, params.head_matrix(params.wp, h)), (1, n, -1))
        out, mass, _ = _bucketed_round(q, k, v, perm, assignment.bucket_size,
                                       need_lse=False)
        heads.append(T.reshape(out, (n, params.head_dim)))
        masses.append(mass[0])
    return heads, np.stack(masses)


def multi_round_attention(tokens: Tensor, assignments: list[BucketAssignment],
                          params: AttentionParams,
                          weight_mode: str = "literal") -> Tensor:
    """Full multi-round attention for one patch: per-head round mixing
    followed by the per-head output projection, summed over heads."""
    tokens = T.as_tensor(tokens)
    if not assignments:
        raise ConfigError("multi_round_attention needs at least one round")
    n = tokens.shape[0]
    m = assignments[0].bucket_size
    perms = [a.perm.reshape(1, n) for a in assignments]
    need_lse = weight_mode == "logit_mass"
    out_total = None
    for h in range(params.n_heads):
        q = T.reshape(_project(tokens, params.head_matrix(params.u, h)), (1, n, -1))
        k = T.reshape(_project(tokens, params.head_matrix(params.v, h)), (1, n, -1))
        v = T.reshape(_project(tokens, params.head_matrix(params.wp, h)), (1, n, -1))
        round_outs, masses, lses = [], [], []
        for perm in perms:
            out, mass, lse = _bucketed_round(q, k, v, perm, m, need_lse)
            round_outs.append(out)
            masses.append(mass)
            lses.append(lse)
        combined = _combine_rounds(round_outs, masses, lses, weight_mode)
        flat = T.reshape(combined, (n, params.head_dim))
        head_out = T.matmul(flat, T.permute(params.head_matrix(params.wo, h), (1, 0)))
        out_total = head_out if out_total is None else out_total + head_out
    return out_total


# ---------------------------------------------------------------------------
# the patch-gated attention layer
# ---------------------------------------------------------------------------

class SahMsa(Module):
    """Patch-gated hash attention over an ``(H, W, C)`` feature map.

    Selected patches are flattened to token sets and attended; unselected
    patches contribute exactly zero (the surrounding block's residual path
    carries them through unchanged).
    """

    def __init__(self, channels: int, head_dim: int, patch_size: int,
                 bucket_size: int, rounds: int, hash_r: float,
                 stream: RandomStream, name: str = "sah_msa",
                 weight_mode: str = "literal",
                 resample_stream: RandomStream | None = None):
        n_tokens = patch_size * patch_size
        if n_tokens % bucket_size:
            raise ConfigError(f"bucket size {bucket_size} must divide patch "
                              f"token count {n_tokens}")
        self.name = name
        self.patch_size = patch_size
        self.bucket_size = bucket_size
        self.rounds = rounds
        self.weight_mode = weight_mode
        self.params = AttentionParams(channels, head_dim, stream)
        # hash draws come from the shared construction stream, so each layer
        # gets its own (a, b); per-forward resampling needs a live stream
        self.hash = draw_hash_params(rounds, channels, hash_r, stream)
        self._resample_stream = resample_stream

    def _round_perms(self, tokens_value: np.ndarray) -> np.ndarray:
        """(rounds, P, N) permutations from the current token contents."""
        if self._resample_stream is not None:
            self.hash = draw_hash_params(self.rounds, self.params.channels,
                                         self.hash.r, self._resample_stream)
        perms = []
        for r in range(self.rounds):
            codes = hash_codes(tokens_value, self.hash.a[r], self.hash.b[r],
                               self.hash.r)
            perms.append(bucketize(codes, self.bucket_size).perm)
        return np.stack(perms)

    def __call__(self, x: Tensor, mask: BinaryPatchMask,
                 plan: GatingPlan | None = None) -> Tensor:
        h, w, c = x.shape
        mp = self.patch_size
        if h % mp or w % mp:
            raise ShapeError(f"feature {x.shape} not divisible by patch size {mp}")
        gh, gw = h // mp, w // mp
        if mask.grid.shape != (gh, gw):
            raise ShapeError(f"patch mask {mask.grid.shape} does not match "
                             f"feature grid {(gh, gw)}")
        if mask.patch_size != mp:
            raise ShapeError(f"mask patch size {mask.patch_size} != layer patch "
                             f"size {mp}")
        n = mp * mp
        selected = np.flatnonzero(mask.grid.ravel())
        if selected.size == 0:
            return Tensor(np.zeros((h, w, c), dtype=x.dtype))

        windows = T.reshape(
            T.permute(T.reshape(x, (gh, mp, gw, mp, c)), (0, 2, 1, 3, 4)),
            (gh * gw, n, c))
        tokens = T.gather(windows, selected, axis=0)

        def compute_perms():
            return self._round_perms(tokens.data)

        if plan is None:
            perms = compute_perms()
        else:
            perms = plan.resolve(f"{self.name}/perms", compute_perms)

        p = selected.size
        flat = T.reshape(tokens, (p * n, c))
        need_lse = self.weight_mode == "logit_mass"
        out_total = None
        ap = self.params
        for head in range(ap.n_heads):
            q = T.reshape(_project(flat, ap.head_matrix(ap.u, head)), (p, n, -1))
            k = T.reshape(_project(flat, ap.head_matrix(ap.v, head)), (p, n, -1))
            v = T.reshape(_project(flat, ap.head_matrix(ap.wp, head)), (p, n, -1))
            round_outs, masses, lses = [], [], []
            for r in range(self.rounds):
                out, mass, lse = _bucketed_round(q, k, v, perms[r],
                                                 self.bucket_size, need_lse)
                round_outs.append(out)
                masses.append(mass)
                lses.append(lse)
            combined = _combine_rounds(round_outs, masses, lses, self.weight_mode)
            head_flat = T.reshape(combined, (p * n, ap.head_dim))
            head_out = T.matmul(head_flat,
                                T.permute(ap.head_matrix(ap.wo, head), (1, 0)))
            out_total = head_out if out_total is None else out_total + head_out

        out_tokens = T.reshape(out_total, (p, n, c))
        all_patches = T.scatter(out_tokens, selected, axis=0, size=gh * gw)
        return T.reshape(
            T.permute(T.reshape(all_patches, (gh, gw, mp, mp, c)), (0, 2, 1, 3, 4)),
            (h, w, c))
