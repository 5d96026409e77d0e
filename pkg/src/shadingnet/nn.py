"""Network operators: convolution, batch norm, activations, resampling, channel attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import DTYPE, ShapeError, Tensor, make_op, mul, tmean


def _conv_layout(x: np.ndarray, pad: int, reach: int):
    """Scatter NCHW input into a (C, flat) buffer where images share their zero padding.

    Each row is ``pad`` zeros followed by W values and each image is ``pad`` zero rows
    followed by H rows, so a kernel tap (i, j) is a constant offset into the buffer.
    """
    n, c, h, w = x.shape
    pitch = w + pad
    rows = h + pad
    length = n * rows * pitch
    buf = np.zeros((c, length + reach), dtype=DTYPE)
    buf[:, :length].reshape(c, n, rows, pitch)[:, :, pad:, pad:] = x.transpose(1, 0, 2, 3)
    return buf, pitch, rows, length


def _conv_stride1(x: np.ndarray, w: np.ndarray, pad: int, dil: int):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = h + 2 * pad - dil * (kh - 1)
    wo = wd + 2 * pad - dil * (kw - 1)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} (dilation {dil}) larger than padded input {h}x{wd}")
    if pad > dil * (min(kh, kw) - 1):
        # shared-padding layout needs the kernel reach to cover the gap; pad explicitly instead
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        y, ctx, _ = _conv_stride1(xp, w, 0, dil)
        return y, ctx, pad
    pitch_reach = dil * (kh - 1) * (wd + pad) + dil * (kw - 1)
    buf, pitch, rows, length = _conv_layout(x, pad, pitch_reach)
    offsets = [i * dil * pitch + j * dil for i in range(kh) for j in range(kw)]
    taps = [np.ascontiguousarray(w[:, :, i, j]) for i in range(kh) for j in range(kw)]
    if o <= 8 and len(taps) > 1:
        # few output channels: one GEMM for all taps, then shift-add the stacked rows
        stacked = np.concatenate(taps, axis=0) @ buf
        out = stacked[:o, offsets[0]:offsets[0] + length].copy()
        for k, off in enumerate(offsets[1:], 1):
            out += stacked[k * o:(k + 1) * o, off:off + length]
    else:
        out = taps[0] @ buf[:, offsets[0]:offsets[0] + length]
        for wk, off in zip(taps[1:], offsets[1:]):
            out += wk @ buf[:, off:off + length]
    y = out.reshape(o, n, rows, pitch)[:, :, :ho, :wo].transpose(1, 0, 2, 3)
    ctx = (buf, pitch, rows, length, offsets, taps, ho, wo)
    return np.ascontiguousarray(y), ctx, 0


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW input, OIHW weights."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv2d input has {c} channels but weight expects inC={ci}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("stride and dilation must be >= 1, padding >= 0")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"bias shape {b.shape} does not match outC={o}")

    y1, ctx, extra_pad = _conv_stride1(x.data, w.data, padding, dilation)
    y = y1[:, :, ::stride, ::stride] if stride > 1 else y1
    if b is not None:
        y = y + b.data.reshape(1, o, 1, 1)
    y = np.ascontiguousarray(y)

    def bw(gy):
        buf, pitch, rows, length, offsets, taps, ho, wo = ctx
        if stride > 1:
            g1 = np.zeros((n, o, ho, wo), dtype=DTYPE)
            g1[:, :, ::stride, ::stride] = gy
        else:
            g1 = gy
        gflat = np.zeros((o, length), dtype=DTYPE)
        gflat.reshape(o, n, rows, pitch)[:, :, :ho, :wo] = g1.transpose(1, 0, 2, 3)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for k, off in enumerate(offsets):
                gw[:, :, k // kw, k % kw] = gflat @ buf[:, off:off + length].T
        if x.requires_grad:
            if o <= 8:
                # few output channels: stack the shifted output grads and do one GEMM
                reach = buf.shape[1] - length
                gext = np.zeros((o, length + 2 * reach), dtype=DTYPE)
                gext[:, reach:reach + length] = gflat
                gcol = np.empty((len(offsets) * o, length + reach), dtype=DTYPE)
                for k, off in enumerate(offsets):
                    gcol[k * o:(k + 1) * o] = gext[:, reach - off:2 * reach - off + length]
                wmat = np.ascontiguousarray(w.data.transpose(1, 2, 3, 0).reshape(c, -1))
                gbuf = wmat @ gcol
            else:
                gbuf = np.zeros_like(buf)
                for wk, off in zip(taps, offsets):
                    gbuf[:, off:off + length] += wk.T @ gflat
            p = padding - extra_pad
            hh, ww = h + 2 * extra_pad, wd + 2 * extra_pad
            gx = gbuf[:, :length].reshape(c, n, rows, pitch)[:, :, p:p + hh, p:p + ww]
            gx = gx.transpose(1, 0, 2, 3)
            if extra_pad:
                gx = gx[:, :, extra_pad:-extra_pad, extra_pad:-extra_pad]
            gx = np.ascontiguousarray(gx)
        if b is not None and b.requires_grad:
            gb = gy.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return make_op(y, inputs, bw)


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, DTYPE), np.ones(channels, DTYPE))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats,
                mode: str = "train", momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes with the batch statistics and folds them into ``running``
    (unbiased variance); eval mode normalizes with ``running`` and leaves it alone.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm gamma/beta must have length {c}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    g4 = gamma.data.reshape(1, c, 1, 1)
    if mode == "train":
        count = n * h * w
        xr = x.data.reshape(n, c, h * w)
        mean = (xr.sum(axis=2).sum(axis=0) / count).astype(DTYPE)
        centered = xr - mean[None, :, None]
        var = (np.einsum("ncp,ncp->c", centered, centered) / count).astype(DTYPE)
        unbiased = var * (count / (count - 1)) if count > 1 else var
        running.mean[:] = (1 - momentum) * running.mean + momentum * mean
        running.var[:] = (1 - momentum) * running.var + momentum * unbiased
    else:
        mean, var = running.mean, running.var
    inv = (1.0 / np.sqrt(var + eps)).astype(DTYPE)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    y = xhat * g4 + beta.data.reshape(1, c, 1, 1)

    def bw(gy):
        gbeta = gy.sum(axis=(0, 2, 3))
        ggamma = (gy * xhat).sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = gy * g4
            if mode == "train":
                m1 = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                m2 = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - m1 - xhat * m2) * inv.reshape(1, c, 1, 1)
            else:
                gx = gxhat * inv.reshape(1, c, 1, 1)
        return gx, ggamma, gbeta

    return make_op(y, (x, gamma, beta), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    neg = x.data < 0
    y = x.data.copy()
    y[neg] *= DTYPE(slope)

    def bw(g):
        gx = g.copy()
        gx[neg] *= DTYPE(slope)
        return (gx,)

    return make_op(y, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(DTYPE)
    return make_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def activation(x: Tensor, kind: str, slope: float | None = None) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, 0.01 if slope is None else slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def _up_axis(a: np.ndarray, axis: int) -> np.ndarray:
    n = a.shape[axis]
    shape = list(a.shape)
    shape[axis] = 2 * n
    out = np.empty(shape, dtype=DTYPE)

    def sl(start, stop=None, step=None):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, stop, step)
        return tuple(idx)

    even, odd = out[sl(0, None, 2)], out[sl(1, None, 2)]
    np.multiply(a, 0.75, out=even)
    np.multiply(a, 0.75, out=odd)
    even[sl(1, None)] += 0.25 * a[sl(0, n - 1)]
    even[sl(0, 1)] += 0.25 * a[sl(0, 1)]
    odd[sl(0, n - 1)] += 0.25 * a[sl(1, None)]
    odd[sl(n - 1, None)] += 0.25 * a[sl(n - 1, None)]
    return out


def _up_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    n = g.shape[axis] // 2

    def sl(start, stop=None, step=None):
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(start, stop, step)
        return tuple(idx)

    ge, go = g[sl(0, None, 2)], g[sl(1, None, 2)]
    da = ge + go
    da *= 0.75
    da[sl(0, n - 1)] += 0.25 * ge[sl(1, None)]
    da[sl(0, 1)] += 0.25 * ge[sl(0, 1)]
    da[sl(1, None)] += 0.25 * go[sl(0, n - 1)]
    da[sl(n - 1, None)] += 0.25 * go[sl(n - 1, None)]
    return da


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """2x bilinear upsampling, half-pixel centers with edge clamping."""
    y = np.ascontiguousarray(_up_axis(_up_axis(x.data, 2), 3))

    def bw(g):
        return (np.ascontiguousarray(_up_axis_adjoint(_up_axis_adjoint(g, 3), 2)),)

    return make_op(y, (x,), bw)


def concat_channels(xs: list[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"cannot concat {t.shape} with {xs[0].shape}")
    if len(xs) == 1:
        return xs[0]
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    y = np.concatenate([t.data for t in xs], axis=1)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return make_op(y, tuple(xs), bw)


def channel_conv1d(p: Tensor, w: Tensor) -> Tensor:
    """Zero-padded 1-D correlation along the channel axis of an N x C x 1 x 1 tensor."""
    k = w.size
    if k % 2 == 0:
        raise ValueError("channel kernel width must be odd")
    n, c = p.shape[:2]
    r = (k - 1) // 2
    v = p.data.reshape(n, c)
    vp = np.pad(v, ((0, 0), (r, r)))
    wf = w.data.reshape(k)
    out = np.zeros((n, c), DTYPE)
    for j in range(k):
        out += wf[j] * vp[:, j:j + c]

    def bw(g):
        g2 = g.reshape(n, c)
        gw = np.array([(g2 * vp[:, j:j + c]).sum() for j in range(k)], DTYPE).reshape(w.shape)
        gvp = np.zeros_like(vp)
        for j in range(k):
            gvp[:, j:j + c] += wf[j] * g2
        return gvp[:, r:r + c].reshape(p.shape), gw

    return make_op(out.reshape(n, c, 1, 1), (p, w), bw)


def eca_gate(x: Tensor, w: Tensor) -> Tensor:
    """Efficient channel attention: pool, 1-D channel conv, sigmoid, rescale."""
    pooled = tmean(x, axis=(2, 3))
    gate = sigmoid(channel_conv1d(pooled, w))
    return mul(x, gate)
