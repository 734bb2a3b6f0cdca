"""Convolution, pooling, normalization and resizing primitives.

All image tensors are laid out [B, C, H, W]. The channel contractions in
conv2d run through matmul so BLAS does the arithmetic; depthwise and pool
kernels loop over the k*k taps, each tap being one strided vector op.
np.einsum turned out to be several times slower than either form for the
small arrays this engine works with, so none of these kernels use it.

Padding follows the TF convention: "same" with stride s gives ceil(H/s)
output rows, splitting any asymmetric padding as (total//2, rest).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, ShapeError, _make, astensor

__all__ = [
    "conv2d",
    "depthwise_conv2d",
    "max_pool",
    "avg_pool",
    "batch_norm",
    "upsample2x",
    "global_avg_pool",
]


def _same_pad(size: int, k_eff: int, stride: int) -> tuple:
    out = -(-size // stride)  # ceil division
    total = max((out - 1) * stride + k_eff - size, 0)
    return total // 2, total - total // 2, out


def _resolve_padding(h, w, k_eff, stride, padding):
    if padding == "same":
        pt, pb, ho = _same_pad(h, k_eff, stride)
        pl, pr, wo = _same_pad(w, k_eff, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
        ho = (h - k_eff) // stride + 1
        wo = (w - k_eff) // stride + 1
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"kernel {k_eff} too large for {h}x{w} input")
    else:
        raise ValueError(f"unknown padding {padding!r}")
    return pt, pb, pl, pr, ho, wo


def _pad4(x: np.ndarray, pt, pb, pl, pr, fill: float = 0.0) -> np.ndarray:
    """Spatial padding of [B, C, H, W]; much cheaper than np.pad."""
    if pt == pb == pl == pr == 0:
        return x
    b, c, h, w = x.shape
    if fill == 0.0:
        out = np.zeros((b, c, h + pt + pb, w + pl + pr), dtype=x.dtype)
    else:
        out = np.full((b, c, h + pt + pb, w + pl + pr), fill, dtype=x.dtype)
    out[:, :, pt:pt + h, pl:pl + w] = x
    return out


def _tap_slices(i, j, dilation, stride, ho, wo):
    rs = slice(i * dilation, i * dilation + stride * ho, stride)
    cs = slice(j * dilation, j * dilation + stride * wo, stride)
    return rs, cs


def _channel_mix(w2: np.ndarray, x4: np.ndarray) -> np.ndarray:
    """[O, C] kernel applied across channels of [B, C, H, W], via BLAS."""
    b, c, h, w = x4.shape
    out = np.matmul(w2, x4.reshape(b, c, h * w))
    return out.reshape(b, w2.shape[0], h, w)


def conv2d(x, w, b=None, stride: int = 1, padding: str = "same", dilation: int = 1) -> Tensor:
    """2-d convolution (really cross-correlation, as everywhere in ML).

    ``x`` is [B, Cin, H, W], ``w`` is [Cout, Cin, kh, kw], optional bias is
    [Cout]. Returns [B, Cout, Ho, Wo].
    """
    x, w = astensor(x), astensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape}, {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"input has {cin} channels but kernel expects {cin_w}")
    kh_eff = dilation * (kh - 1) + 1
    kw_eff = dilation * (kw - 1) + 1
    pt, pb, pl, pr, ho, wo = _resolve_padding(h, wd, max(kh_eff, kw_eff), stride, padding)

    bias = astensor(b) if b is not None else None
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")

    if kh == kw == 1:
        # pointwise fast path: one channel contraction, no padding
        if stride > 1:
            xs = np.ascontiguousarray(x.data[:, :, ::stride, ::stride])
        else:
            xs = x.data
        out = _channel_mix(w.data[:, :, 0, 0], xs)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def vjp1(g):
            g3 = g.reshape(bsz, cout, -1)
            x3 = xs.reshape(bsz, cin, -1)
            gw = np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0)[:, :, None, None]
            gx_s = _channel_mix(w.data[:, :, 0, 0].T, np.ascontiguousarray(g))
            if stride > 1:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = gx_s
            else:
                gx = gx_s
            if bias is None:
                return gx, gw
            return gx, gw, g.sum(axis=(0, 2, 3))

        parents = (x, w) if bias is None else (x, w, bias)
        return _make(out, parents, vjp1, "conv2d")

    xp = _pad4(x.data, pt, pb, pl, pr)
    taps = []
    out = None
    for i in range(kh):
        for j in range(kw):
            rs, cs = _tap_slices(i, j, dilation, stride, ho, wo)
            xt = np.ascontiguousarray(xp[:, :, rs, cs])
            taps.append(xt)
            term = _channel_mix(w.data[:, :, i, j], xt)
            out = term if out is None else out + term
    if bias is not None:
        out += bias.data[None, :, None, None]

    def vjp(g):
        g3 = np.ascontiguousarray(g).reshape(bsz, cout, -1)
        g3t = g3.transpose(0, 2, 1)
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for t, xt in enumerate(taps):
            i, j = divmod(t, kw)
            x3 = xt.reshape(bsz, cin, -1)
            gw[:, :, i, j] = np.matmul(x3, g3t).sum(axis=0).T
            rs, cs = _tap_slices(i, j, dilation, stride, ho, wo)
            gxp[:, :, rs, cs] += _channel_mix(w.data[:, :, i, j].T, g)
        gx = gxp[:, :, pt:pt + h, pl:pl + wd]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, vjp, "conv2d")


def depthwise_conv2d(x, w, stride: int = 1, padding: str = "same", dilation: int = 1) -> Tensor:
    """Per-channel convolution: ``w`` is [C, kh, kw], one filter per channel."""
    x, w = astensor(x), astensor(w)
    if x.ndim != 4 or w.ndim != 3:
        raise ShapeError(f"depthwise_conv2d got shapes {x.shape}, {w.shape}")
    bsz, c, h, wd = x.shape
    cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"input has {c} channels but kernel has {cw}")
    kh_eff = dilation * (kh - 1) + 1
    kw_eff = dilation * (kw - 1) + 1
    pt, pb, pl, pr, ho, wo = _resolve_padding(h, wd, max(kh_eff, kw_eff), stride, padding)

    xp = _pad4(x.data, pt, pb, pl, pr)
    out = np.zeros((bsz, c, ho, wo), dtype=xp.dtype)
    buf = np.empty_like(out)
    for i in range(kh):
        for j in range(kw):
            rs, cs = _tap_slices(i, j, dilation, stride, ho, wo)
            np.multiply(xp[:, :, rs, cs], w.data[None, :, i, j, None, None], out=buf)
            out += buf

    def vjp(g):
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        scratch = np.empty_like(g)
        for i in range(kh):
            for j in range(kw):
                rs, cs = _tap_slices(i, j, dilation, stride, ho, wo)
                np.multiply(g, xp[:, :, rs, cs], out=scratch)
                gw[:, i, j] = scratch.sum(axis=(0, 2, 3))
                np.multiply(g, w.data[None, :, i, j, None, None], out=scratch)
                gxp[:, :, rs, cs] += scratch
        return gxp[:, :, pt:pt + h, pl:pl + wd], gw

    return _make(out, (x, w), vjp, "depthwise_conv2d")


def max_pool(x, k: int = 3, stride: int = 1, padding: str = "same") -> Tensor:
    """Max over k-by-k windows. Ties go to the first window position."""
    x = astensor(x)
    if x.ndim != 4:
        raise ShapeError(f"max_pool expects 4-d input, got {x.shape}")
    bsz, c, h, wd = x.shape
    pt, pb, pl, pr, ho, wo = _resolve_padding(h, wd, k, stride, padding)

    xp = _pad4(x.data, pt, pb, pl, pr, fill=-np.inf)
    out = None
    for i in range(k):
        for j in range(k):
            rs, cs = _tap_slices(i, j, 1, stride, ho, wo)
            if out is None:
                out = xp[:, :, rs, cs].copy()
            else:
                np.maximum(out, xp[:, :, rs, cs], out=out)

    def vjp(g):
        # route each output's gradient to the first tap holding its max,
        # reproducing argmax's first-index tie rule
        gxp = np.zeros_like(xp)
        claimed = np.zeros(out.shape, dtype=bool)
        for i in range(k):
            for j in range(k):
                rs, cs = _tap_slices(i, j, 1, stride, ho, wo)
                mask = xp[:, :, rs, cs] == out
                mask &= ~claimed
                claimed |= mask
                gxp[:, :, rs, cs] += np.where(mask, g, 0.0)
        return (gxp[:, :, pt:pt + h, pl:pl + wd],)

    return _make(out, (x,), vjp, "max_pool")


def avg_pool(x, k: int = 3, stride: int = 1, padding: str = "same") -> Tensor:
    """Average over k-by-k windows, counting only in-bounds pixels."""
    x = astensor(x)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool expects 4-d input, got {x.shape}")
    bsz, c, h, wd = x.shape
    pt, pb, pl, pr, ho, wo = _resolve_padding(h, wd, k, stride, padding)

    xp = _pad4(x.data, pt, pb, pl, pr)
    ones = _pad4(np.ones((1, 1, h, wd)), pt, pb, pl, pr)
    acc = np.zeros((bsz, c, ho, wo), dtype=xp.dtype)
    count = np.zeros((1, 1, ho, wo))
    for i in range(k):
        for j in range(k):
            rs, cs = _tap_slices(i, j, 1, stride, ho, wo)
            acc += xp[:, :, rs, cs]
            count += ones[:, :, rs, cs]
    out = acc / count

    def vjp(g):
        gn = g / count
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                rs, cs = _tap_slices(i, j, 1, stride, ho, wo)
                gxp[:, :, rs, cs] += gn
        # padded positions collected shares too, but they fall outside the
        # crop below, matching the forward's in-bounds-only averaging
        return (gxp[:, :, pt:pt + h, pl:pl + wd],)

    return _make(out, (x,), vjp, "avg_pool")


def batch_norm(x, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization with batch statistics, no affine part.

    Statistics are recomputed from the incoming batch on every call; there
    is no running-average mode. That choice makes the whole network a pure
    function of (weights, batch), which the outer gradient machinery relies
    on.
    """
    x = astensor(x)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects 4-d input, got {x.shape}")
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if n < 2:
        raise ShapeError("batch_norm needs more than one value per channel")
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = np.multiply(xc, xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g):
        gsum = g.sum(axis=axes, keepdims=True)
        xg = (g * xhat).sum(axis=axes, keepdims=True)
        return (inv / n * (n * g - gsum - xhat * xg),)

    return _make(xhat, (x,), vjp, "batch_norm")


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of [B, C, H, W]."""
    x = astensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample2x expects 4-d input, got {x.shape}")
    bsz, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def vjp(g):
        return (g.reshape(bsz, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), vjp, "upsample2x")


def global_avg_pool(x) -> Tensor:
    """Spatial mean: [B, C, H, W] -> [B, C]."""
    x = astensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-d input, got {x.shape}")
    bsz, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None], x.shape) / (h * w),)

    return _make(out, (x,), vjp, "global_avg_pool")
