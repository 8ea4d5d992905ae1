"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: numpy arrays for storage, a taped graph of
closures for gradients, and exactly the op set the reconstruction network
needs. Design rules that differ from the big frameworks:

* no broadcasting between tensors except scalar-tensor (use explicit ops);
* channel-last layout everywhere: images are ``(H, W, C)``;
* every op checks its output for non-finite values and raises
  :class:`~cst.errors.NumericError` naming the op;
* a graph can be consumed by ``backward`` exactly once.

Storage is float32 by default; gradient checking is meant to run in float64
(see :func:`set_default_dtype` / :func:`grad_check`).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ConfigError, DeterminismError, GraphError, NumericError, ShapeError

_default_dtype = np.float32
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the default storage dtype."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy-backed array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op",
                 "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, np.ndarray):
            if dtype is not None:
                data = data.astype(dtype, copy=False)
            elif data.dtype not in (np.float32, np.float64):
                data = data.astype(_default_dtype)
        else:
            data = np.asarray(data, dtype=dtype or _default_dtype)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._released = False

    # ---- introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def value(self) -> np.ndarray:
        """The raw array (alias for ``data``)."""
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a size-1 tensor, got shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self._op})"

    # ---- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise ShapeError("tensor / tensor is not supported; divide by a scalar")
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def permute(self, axes):
        return permute(self, axes)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# graph plumbing
# ---------------------------------------------------------------------------

def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"op '{op}' produced non-finite values")


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor],
          backward: Callable) -> Tensor:
    """Wrap an op result; record the graph edge if grads are live."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._released = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _binary_operands(a, b, op: str):
    """Normalize (tensor, tensor|scalar) operands; enforce the no-broadcast rule."""
    a = as_tensor(a)
    if isinstance(b, (int, float, np.floating, np.integer)):
        return a, None, float(b)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"op '{op}' needs equal shapes, got {a.shape} and {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"op '{op}' needs equal dtypes, got {a.dtype} and {b.dtype}")
    return a, b, None


def backward(loss: Tensor) -> None:
    """Reverse-mode pass from a scalar loss; fills ``grad`` on leaf tensors.

    Each recorded graph may be consumed once; a second call raises
    :class:`GraphError`.
    """
    if loss.shape != ():
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise GraphError("graph already consumed; re-record the forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad (graph was not recorded)")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        if node._released:
            raise GraphError("graph already consumed; re-record the forward pass")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g.astype(parent.data.dtype, copy=False)
            else:
                parent.grad = parent.grad + g

    # release: leaves keep their grads, interior nodes free theirs
    for node in topo:
        if node._parents:
            node.grad = None
            node._parents = ()
            node._backward = None
            node._released = True


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, bt, scalar = _binary_operands(a, b, "add")
    if bt is None:
        data = a.data + scalar
        return _node(data, "add", (a,), lambda g: (g,))
    data = a.data + bt.data
    return _node(data, "add", (a, bt), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, bt, scalar = _binary_operands(a, b, "sub")
    if bt is None:
        return _node(a.data - scalar, "sub", (a,), lambda g: (g,))
    return _node(a.data - bt.data, "sub", (a, bt), lambda g: (g, -g))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, bt, scalar = _binary_operands(a, b, "mul")
    if bt is None:
        return _node(a.data * scalar, "mul", (a,), lambda g: (g * scalar,))
    ad, bd = a.data, bt.data
    return _node(ad * bd, "mul", (a, bt), lambda g: (g * bd, g * ad))


def matmul(a, b) -> Tensor:
    """Matrix product; operands are 2-D, or stacked with identical lead dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul lead dims must match exactly, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _node(np.matmul(ad, bd), "matmul", (a, b), _bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def _bw(g):
        return (_expand_reduced(g, shape, axis, keepdims).copy(),)

    return _node(data, "sum", (a,), _bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    count = a.size if axis is None else a.shape[axis]

    def _bw(g):
        return (_expand_reduced(g, shape, axis, keepdims) / count,)

    return _node(data, "mean", (a,), _bw)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    old = a.shape
    data = a.data.reshape(shape)
    return _node(data, "reshape", (a,), lambda g: (g.reshape(old),))


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for shape {a.shape}")
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), "permute", (a,),
                 lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bw(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors)))

    return _node(data, "concat", tuple(tensors), _bw)


def gather(a, indices, axis: int = 0) -> Tensor:
    """Select rows along ``axis`` by an index list."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather needs a 1-D index list, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ShapeError(f"gather index out of range for axis size {a.shape[axis]}")
    data = np.take(a.data, idx, axis=axis)
    in_shape = a.shape

    def _bw(g):
        out = np.zeros(in_shape, dtype=g.dtype)
        np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _node(data, "gather", (a,), _bw)


def scatter(a, indices, axis: int = 0, size: int | None = None) -> Tensor:
    """Place rows of ``a`` at ``indices`` along ``axis``; zeros elsewhere.

    Indices must be unique. With a permutation and ``size=None`` this is the
    exact inverse of :func:`gather`.
    """
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size != a.shape[axis]:
        raise ShapeError(
            f"scatter needs one index per row: {idx.shape} vs axis size {a.shape[axis]}")
    if np.unique(idx).size != idx.size:
        raise ShapeError("scatter indices must be unique")
    size = a.shape[axis] if size is None else int(size)
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ShapeError(f"scatter index out of range for target size {size}")
    out_shape = list(a.shape)
    out_shape[axis] = size
    data = np.zeros(out_shape, dtype=a.dtype)
    np.moveaxis(data, axis, 0)[idx] = np.moveaxis(a.data, axis, 0)

    def _bw(g):
        return (np.take(g, idx, axis=axis),)

    return _node(data, "scatter", (a,), _bw)


def batched_gather(a, indices) -> Tensor:
    """Per-batch row selection: ``out[b, i] = a[b, indices[b, i]]``.

    ``a`` is ``(B, N)`` or ``(B, N, D)``; ``indices`` is ``(B, N)``. Used to
    apply one permutation per patch when sorting tokens into hash order.
    """
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.ndim not in (2, 3) or idx.shape != a.shape[:2]:
        raise ShapeError(f"batched_gather shapes disagree: {a.shape} vs {idx.shape}")
    bi = np.arange(a.shape[0])[:, None]
    data = a.data[bi, idx]
    in_shape = a.shape

    def _bw(g):
        out = np.zeros(in_shape, dtype=g.dtype)
        np.add.at(out, (bi, idx), g)
        return (out,)

    return _node(data, "batched_gather", (a,), _bw)


def rowscale(a, s) -> Tensor:
    """Scale each row vector of ``a (..., D)`` by ``s (...)``.

    ``s`` may be a constant ndarray (no gradient) or a Tensor.
    """
    a = as_tensor(a)
    s_t = s if isinstance(s, Tensor) else None
    sd = s_t.data if s_t is not None else np.asarray(s, dtype=a.dtype)
    if sd.shape != a.shape[:-1]:
        raise ShapeError(f"rowscale needs s shaped {a.shape[:-1]}, got {sd.shape}")
    ad = a.data
    data = ad * sd[..., None]
    parents = (a, s_t) if s_t is not None else (a,)

    def _bw(g):
        ga = g * sd[..., None]
        if s_t is None:
            return (ga,)
        return ga, (g * ad).sum(axis=-1)

    return _node(data, "rowscale", parents, _bw)


# ---------------------------------------------------------------------------
# activations and normalization
# ---------------------------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-a.data))
    return _node(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


# plain python floats: numpy scalars would promote float32 arrays to float64
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    y = x * cdf

    def _bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _node(y, "gelu", (a,), _bw)


def texp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _node(y, "exp", (a,), lambda g: (g * y,))


def tlog(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return _node(y, "log", (a,), lambda g: (g / x,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _node(np.abs(a.data), "abs", (a,), lambda g: (g * sign,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _node(y, "softmax", (a,), _bw)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel (last) axis at every leading position."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    c = a.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm affine params need shape ({c},), got {gamma.shape} and {beta.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    y = xhat * gamma.data + beta.data

    def _bw(g):
        lead = tuple(range(x.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead) if beta.requires_grad else None
        if a.requires_grad:
            dxhat = g * gamma.data
            dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        else:
            dx = None
        return dx, dgamma, dbeta

    return _node(y, "layer_norm", (a, gamma, beta), _bw)


# ---------------------------------------------------------------------------
# convolutions and pooling (channel-last: H, W, C)
# ---------------------------------------------------------------------------

def _conv_geometry(size, pad, eff_k, stride):
    out = (size + 2 * pad - eff_k) // stride + 1
    if out <= 0:
        raise ShapeError(f"conv output collapsed: size={size} pad={pad} "
                         f"kernel_extent={eff_k} stride={stride}")
    return out


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0,
           dilation: int = 1, groups: int = 1) -> Tensor:
    """2-D convolution. ``x``: (H, W, Cin); ``w``: (Cout, Cin//groups, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(bias) if bias is not None else None
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d needs x (H,W,C) and w (Cout,Cg,kh,kw), "
                         f"got {x.shape} and {w.shape}")
    hin, win_, cin = x.shape
    cout, cg, kh, kw = w.shape
    if cin % groups or cout % groups:
        raise ShapeError(f"groups={groups} must divide Cin={cin} and Cout={cout}")
    if cg != cin // groups:
        raise ShapeError(f"kernel expects Cin//groups={cin // groups} input "
                         f"channels per group, got {cg}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias needs shape ({cout},), got {b.shape}")
    s, p, d = int(stride), int(padding), int(dilation)
    eff_kh, eff_kw = (kh - 1) * d + 1, (kw - 1) * d + 1
    ho = _conv_geometry(hin, p, eff_kh, s)
    wo = _conv_geometry(win_, p, eff_kw, s)
    og = cout // groups

    xp = np.pad(x.data, ((p, p), (p, p), (0, 0))) if p else x.data
    windows = sliding_window_view(xp, (eff_kh, eff_kw), axis=(0, 1))
    windows = windows[::s, ::s][:ho, :wo, :, ::d, ::d]
    wing = windows.reshape(ho, wo, groups, cg, kh, kw)
    wg = w.data.reshape(groups, og, cg, kh, kw)
    out = np.einsum("hwgikl,goikl->hwgo", wing, wg, optimize=True)
    out = np.ascontiguousarray(out).reshape(ho, wo, cout)
    if b is not None:
        out = out + b.data

    def _bw(g):
        gg = g.reshape(ho, wo, groups, og)
        dw = None
        if w.requires_grad:
            dw = np.einsum("hwgikl,hwgo->goikl", wing, gg, optimize=True)
            dw = dw.reshape(cout, cg, kh, kw)
        dx = None
        if x.requires_grad:
            contrib = np.einsum("hwgo,goikl->hwgikl", gg, wg, optimize=True)
            contrib = contrib.reshape(ho, wo, cin, kh, kw)
            dxp = np.zeros_like(xp)
            for ki in range(kh):
                for li in range(kw):
                    dxp[ki * d: ki * d + (ho - 1) * s + 1: s,
                        li * d: li * d + (wo - 1) * s + 1: s] += contrib[:, :, :, ki, li]
            dx = dxp[p: p + hin, p: p + win_] if p else dxp
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 1))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, "conv2d", parents, _bw)


def conv_transpose2d(x, w, bias=None, stride: int = 1, padding: int = 0,
                     groups: int = 1) -> Tensor:
    """Transposed 2-D convolution. ``x``: (H, W, Cin); ``w``: (Cin, Cout//groups, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(bias) if bias is not None else None
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d needs x (H,W,C) and w (Cin,Og,kh,kw), "
                         f"got {x.shape} and {w.shape}")
    hin, win_, cin = x.shape
    wcin, og, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"kernel expects Cin={cin}, got {wcin}")
    if cin % groups:
        raise ShapeError(f"groups={groups} must divide Cin={cin}")
    cout = og * groups
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias needs shape ({cout},), got {b.shape}")
    s, p = int(stride), int(padding)
    full_h = (hin - 1) * s + kh
    full_w = (win_ - 1) * s + kw
    ho, wo = full_h - 2 * p, full_w - 2 * p
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose output collapsed: {(ho, wo)}")
    ig = cin // groups

    xg = x.data.reshape(hin, win_, groups, ig)
    wg = w.data.reshape(groups, ig, og, kh, kw)
    contrib = np.einsum("hwgi,giokl->hwgokl", xg, wg, optimize=True)
    contrib = contrib.reshape(hin, win_, cout, kh, kw)
    full = np.zeros((full_h, full_w, cout), dtype=x.dtype)
    for ki in range(kh):
        for li in range(kw):
            full[ki: ki + (hin - 1) * s + 1: s,
                 li: li + (win_ - 1) * s + 1: s] += contrib[:, :, :, ki, li]
    out = full[p: p + ho, p: p + wo]
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out)

    def _bw(g):
        gfull = np.zeros((full_h, full_w, cout), dtype=g.dtype)
        gfull[p: p + ho, p: p + wo] = g
        dx = np.zeros_like(x.data) if x.requires_grad else None
        dw = np.zeros_like(w.data) if w.requires_grad else None
        dwg = dw.reshape(groups, ig, og, kh, kw) if dw is not None else None
        for ki in range(kh):
            for li in range(kw):
                gs = gfull[ki: ki + (hin - 1) * s + 1: s,
                           li: li + (win_ - 1) * s + 1: s]
                gsg = gs.reshape(hin, win_, groups, og)
                if dx is not None:
                    dx += np.einsum("hwgo,gio->hwgi", gsg, wg[..., ki, li],
                                    optimize=True).reshape(hin, win_, cin)
                if dwg is not None:
                    dwg[..., ki, li] += np.einsum("hwgi,hwgo->gio", xg, gsg,
                                                  optimize=True)
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 1))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, "conv_transpose2d", parents, _bw)


def avg_pool2d(x, kernel: int) -> Tensor:
    """Non-overlapping ``kernel x kernel`` mean pooling on (H, W, C)."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"avg_pool2d needs (H,W,C), got {x.shape}")
    h, w, c = x.shape
    k = int(kernel)
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d needs dims divisible by {k}, got {(h, w)}")
    data = x.data.reshape(h // k, k, w // k, k, c).mean(axis=(1, 3))

    def _bw(g):
        gx = np.repeat(np.repeat(g, k, axis=0), k, axis=1) / (k * k)
        return (gx,)

    return _node(data, "avg_pool2d", (x,), _bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, x: Tensor, eps: float = 1e-5, coords=None) -> float:
    """Compare analytic gradients of a scalar-valued ``f`` with central differences.

    Returns ``max_i |analytic_i - fd_i| / max(1, |analytic_i|)`` over the
    checked coordinates of ``x`` (all of them unless ``coords`` selects a
    subset). Runs in float64 regardless of the input dtype. ``f`` is called
    twice at the same point first; bitwise-different results raise
    :class:`DeterminismError`.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ConfigError(f"grad_check eps must be in [1e-6, 1e-3], got {eps}")
    base = x.data.astype(np.float64)
    leaf = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    y1 = f(leaf)
    if not isinstance(y1, Tensor) or y1.shape != ():
        raise GraphError("grad_check needs f to return a scalar tensor")
    with no_grad():
        y2 = f(Tensor(base.copy(), dtype=np.float64))
    if y1.data.tobytes() != y2.data.tobytes():
        raise DeterminismError("f returned different values on identical inputs")
    backward(y1)
    analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad

    if coords is None:
        coords = range(base.size)
    worst = 0.0
    for i in coords:
        xp = base.copy()
        xp.flat[i] += eps
        xm = base.copy()
        xm.flat[i] -= eps
        with no_grad():
            fp = f(Tensor(xp, dtype=np.float64)).item()
            fm = f(Tensor(xm, dtype=np.float64)).item()
        fd = (fp - fm) / (2.0 * eps)
        a = float(analytic.flat[i])
        err = abs(a - fd) / max(1.0, abs(a))
        worst = max(worst, err)
    return worst
