"""Composite differentiable ops on (C, T, H, W) feature volumes.

Every op here accepts either a single volume ``(C, T, H, W)`` or a batch
``(B, C, T, H, W)``; the channel axis is always the one right after the
optional batch axis.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr

from .errors import DimensionError
from .tensor import Tensor, as_tensor, make, max_, mean

LN_EPS = 1e-5


def _batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 4:
        return x.data[None], False
    if x.ndim == 5:
        return x.data, True
    raise DimensionError(f"{op} expects (C,T,H,W) or (B,C,T,H,W), got shape {x.shape}")


def _out_size(n: int, k: int, pad: int, stride: int, op: str) -> int:
    span = n + 2 * pad - k
    if k < 1 or stride < 1 or pad < 0 or span < 0:
        raise DimensionError(f"{op}: kernel {k} does not fit input {n} with pad {pad}, stride {stride}")
    return span // stride + 1


def conv2d_spatial(x, w, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Apply one 2-D kernel to every frame independently.

    ``w`` has shape ``(C_out, C_in, k, k)``; padding is zeros. Frame ``t`` of
    the output depends only on frame ``t`` of the input.
    """
    x, w = as_tensor(x), as_tensor(w)
    b = None if bias is None else as_tensor(bias)
    X, batched = _batched(x, "conv2d_spatial")
    B, C, T, H, W = X.shape
    if w.ndim != 4 or w.shape[1] != C:
        raise DimensionError(f"conv2d_spatial weight {w.shape} does not match input channels of {x.shape}")
    co, _, kh, kw = w.shape
    Ho = _out_size(H, kh, pad, stride, "conv2d_spatial")
    Wo = _out_size(W, kw, pad, stride, "conv2d_spatial")
    if b is not None and b.shape != (co,):
        raise DimensionError(f"conv2d_spatial bias {b.shape} != ({co},)")

    Xp = np.pad(X, ((0, 0), (0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else X
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1

    def tap(i: int, j: int) -> np.ndarray:
        return Xp[:, :, :, i : i + hs : stride, j : j + ws : stride].reshape(B, C, -1)

    # per-tap (C_out, C_in) slices must be contiguous or matmul falls off the BLAS path
    wt = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1))
    out = np.zeros((B, co, T * Ho * Wo), dtype=np.result_type(X, w.data))
    for i in range(kh):
        for j in range(kw):
            out += wt[i, j] @ tap(i, j)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(B, co, T, Ho, Wo)

    def bw(g):
        g = g.reshape(B, co, -1) if batched else g[None].reshape(B, co, -1)
        gx = gw = gb = None
        if x.requires_grad:
            wtt = np.ascontiguousarray(wt.transpose(0, 1, 3, 2))
            gxp = np.zeros_like(Xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = (wtt[i, j] @ g).reshape(B, C, T, Ho, Wo)
                    gxp[:, :, :, i : i + hs : stride, j : j + ws : stride] += contrib
            gx = gxp[:, :, :, pad : pad + H, pad : pad + W] if pad else gxp
            gx = gx if batched else gx[0]
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    gw[:, :, i, j] = (g @ tap(i, j).transpose(0, 2, 1)).sum(axis=0)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return make("conv2d_spatial", out if batched else out[0], inputs, bw)


def conv1d_temporal(x, w, bias=None, pad: int = 0) -> Tensor:
    """Slide a kernel of shape ``(C_out, C_in, k)`` along T at every spatial site."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if bias is None else as_tensor(bias)
    X, batched = _batched(x, "conv1d_temporal")
    B, C, T, H, W = X.shape
    if w.ndim != 3 or w.shape[1] != C:
        raise DimensionError(f"conv1d_temporal weight {w.shape} does not match input channels of {x.shape}")
    co, _, k = w.shape
    To = _out_size(T, k, pad, 1, "conv1d_temporal")
    if b is not None and b.shape != (co,):
        raise DimensionError(f"conv1d_temporal bias {b.shape} != ({co},)")

    Xp = np.pad(X, ((0, 0), (0, 0), (pad, pad), (0, 0), (0, 0))) if pad else X

    def tap(i: int) -> np.ndarray:
        return Xp[:, :, i : i + To].reshape(B, C, -1)

    wt = np.ascontiguousarray(w.data.transpose(2, 0, 1))
    out = np.zeros((B, co, To * H * W), dtype=np.result_type(X, w.data))
    for i in range(k):
        out += wt[i] @ tap(i)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(B, co, To, H, W)

    def bw(g):
        g = g.reshape(B, co, -1) if batched else g[None].reshape(B, co, -1)
        gx = gw = gb = None
        if x.requires_grad:
            wtt = np.ascontiguousarray(wt.transpose(0, 2, 1))
            gxp = np.zeros_like(Xp)
            for i in range(k):
                gxp[:, :, i : i + To] += (wtt[i] @ g).reshape(B, C, To, H, W)
            gx = gxp[:, :, pad : pad + T] if pad else gxp
            gx = gx if batched else gx[0]
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(k):
                gw[:, :, i] = (g @ tap(i).transpose(0, 2, 1)).sum(axis=0)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return make("conv1d_temporal", out if batched else out[0], inputs, bw)


def channel_linear(x, w, bias=None, axis: int = 1) -> Tensor:
    """Fully connected layer over the channel axis, applied at every site.

    ``x`` is ``(B, C_in, ...)`` (``axis=1``) or unbatched ``(C_in, ...)``
    (``axis=0``); ``w`` is ``(C_out, C_in)``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if axis not in (0, 1) or x.ndim < axis + 1:
        raise DimensionError(f"channel_linear: bad channel axis {axis} for shape {x.shape}")
    if w.ndim != 2 or w.shape[1] != x.shape[axis]:
        raise DimensionError(f"channel_linear weight {w.shape} does not match channels of {x.shape}")
    lead = x.shape[:axis]
    rest = x.shape[axis + 1 :]
    flat = x.reshape(lead + (x.shape[axis], -1))
    out = w @ flat
    if bias is not None:
        out = out + as_tensor(bias).reshape(-1, 1)
    return out.reshape(lead + (w.shape[0],) + rest)


def layer_norm(x, gamma, beta, eps: float = LN_EPS, axis: int | None = None) -> Tensor:
    """Normalize over the channel axis at every spatiotemporal site.

    ``axis`` defaults to the channel axis of a (B,)C,T,H,W volume; pass it
    explicitly for other layouts (e.g. ``-1`` for token-major ``(L, C)``).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if axis is None:
        axis = 1 if x.ndim == 5 else 0
    axis %= x.ndim
    n = x.shape[axis]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} != ({n},)")
    bshape = [1] * x.ndim
    bshape[axis] = n
    g_, b_ = gamma.data.reshape(bshape), beta.data.reshape(bshape)

    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g_ + b_
    red = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = g * g_
            gx = inv * (
                dxhat
                - dxhat.mean(axis=axis, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
            )
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=red)
        if beta.requires_grad:
            gbeta = g.sum(axis=red)
        return gx, ggamma, gbeta

    return make("layer_norm", out, (x, gamma, beta), bw)


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    x = as_tensor(x)
    cdf = ndtr(x.data).astype(x.dtype, copy=False)
    pdf = np.exp(-0.5 * x.data * x.data) * (1.0 / math.sqrt(2.0 * math.pi))
    return make("gelu", x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def pool(x, dims, mode: str = "mean") -> Tensor:
    """Reduce the listed axes with ``mean`` or ``max``."""
    x = as_tensor(x)
    dims = (dims,) if isinstance(dims, int) else tuple(dims)
    if not dims:
        raise DimensionError("pool needs at least one axis")
    for d in dims:
        if not -x.ndim <= d < x.ndim:
            raise DimensionError(f"pool axis {d} out of range for shape {x.shape}")
        if x.shape[d] == 0:
            raise DimensionError(f"pool over empty axis {d} of shape {x.shape}")
    if mode == "mean":
        return mean(x, dims)
    if mode == "max":
        return max_(x, dims)
    raise ValueError(f"unknown pool mode {mode!r}")


def pairwise_distance(a, b) -> Tensor:
    """Euclidean distance matrix between rows of ``a`` (n, d) and ``b`` (k, d).

    The gradient at coincident points (distance 0) is taken as 0.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_distance needs (n,d) and (k,d), got {a.shape} and {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(dist > 0, g / dist, 0.0)
        weighted = coef[..., None] * diff
        ga = weighted.sum(axis=1) if a.requires_grad else None
        gb = -weighted.sum(axis=0) if b.requires_grad else None
        return ga, gb

    return make("pairwise_distance", dist, (a, b), bw)
