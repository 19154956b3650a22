"""Differentiable layer kernels over NCHW tensors.

Each kernel is a single graph node with a hand-written backward so the
training loop does not pay per-element graph overhead.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..autodiff import ShapeError, Tensor, _result, _tally, mean

BN_EPS = 1e-5


def _pads(padding) -> tuple[int, int]:
    if isinstance(padding, (tuple, list)):
        p0, p1 = (int(v) for v in padding)
    else:
        p0 = p1 = int(padding)
    if p0 < 0 or p1 < 0:
        raise ShapeError(f"padding must be non-negative, got {padding}")
    return p0, p1


def _out_extent(size: int, k: int, stride: int, padding) -> int:
    p0, p1 = _pads(padding)
    span = size + p0 + p1 - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"extent {size} with kernel {k}, stride {stride}, padding {padding} is not integral")
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding=0) -> Tensor:
    """Cross-correlation of ``x`` [b, ci, h, w] with ``weight`` [co, ci, kh, kw].

    ``padding`` is either one zero-padding width for every border or a
    ``(before, after)`` pair applied to both spatial axes.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    b, ci, h, w = x.shape
    co, wci, kh, kw = weight.shape
    if wci != ci:
        raise ShapeError(f"kernel expects {wci} input channels, got {ci}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"bias shape {bias.shape} does not match {co} output channels")
    if stride < 1:
        raise ShapeError("stride must be positive")
    ho = _out_extent(h, kh, stride, padding)
    wo = _out_extent(w, kw, stride, padding)
    p0, p1 = _pads(padding)
    padded = p0 or p1
    xd, wd = x.data, weight.data
    wm = wd.reshape(co, -1)
    _tally("conv", 2 * b * ho * wo * co * ci * kh * kw)

    pointwise = kh == 1 and kw == 1 and not padded
    if pointwise:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, ci)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (p0, p1), (p0, p1))) if padded else xd
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, ci * kh * kw)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    out = out.reshape(b, ho, wo, co).transpose(0, 3, 1, 2)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (gm.T @ cols).reshape(wd.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = gm @ wm
            if pointwise:
                d = dcols.reshape(b, ho, wo, ci).transpose(0, 3, 1, 2)
                if stride > 1:
                    gx = np.zeros(xd.shape, dtype=xd.dtype)
                    gx[:, :, ::stride, ::stride] = d
                else:
                    gx = d
            else:
                dcols = dcols.reshape(b, ho, wo, ci, kh, kw)
                gxp = np.zeros((b, ci, h + p0 + p1, w + p0 + p1), dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, p0:p0 + h, p0:p0 + w] if padded else gxp
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return _result(out, parents, grad_fn)


def depthwise_conv2d(x: Tensor, weight: Tensor, padding: int = 1) -> Tensor:
    """Per-channel stride-1 correlation; ``weight`` is [c, 1, kh, kw]."""
    if x.ndim != 4:
        raise ShapeError("depthwise_conv2d expects 4-D input")
    b, c, h, w = x.shape
    if weight.shape[0] != c or weight.shape[1] != 1:
        raise ShapeError(f"depthwise kernel {weight.shape} does not match {c} channels")
    kh, kw = weight.shape[2:]
    ho = _out_extent(h, kh, 1, padding)
    wo = _out_extent(w, kw, 1, padding)
    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    out = np.zeros((b, c, ho, wo), dtype=np.result_type(xd, wd))
    tmp = np.empty_like(out)
    for i in range(kh):
        for j in range(kw):
            np.multiply(xp[:, :, i:i + ho, j:j + wo], wd[:, 0, i, j][:, None, None], out=tmp)
            out += tmp
    _tally("conv", 2 * b * c * ho * wo * kh * kw)

    def grad_fn(g):
        gw = gx = None
        if weight.requires_grad:
            gw = np.empty_like(wd)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, xp[:, :, i:i + ho, j:j + wo])
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            tmp = np.empty(g.shape, dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    np.multiply(g, wd[:, 0, i, j][:, None, None], out=tmp)
                    gxp[:, :, i:i + ho, j:j + wo] += tmp
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw

    return _result(out, (x, weight), grad_fn)


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, eps: float = BN_EPS):
    """Per-channel normalization of an NCHW tensor.

    Returns ``(out, batch_mean, batch_var)``; the batch statistics are None in
    eval mode. Variance uses the 1/N estimator.
    """
    if x.ndim != 4:
        raise ShapeError("batch_norm expects 4-D input")
    b, c, h, w = x.shape
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"normalization parameters do not match {c} channels")
    xd = x.data
    gd = scale.data[:, None, None]
    n = b * h * w
    _tally("elementwise", 4 * xd.size)
    if training:
        if n < 2:
            raise ShapeError("batch_norm in train mode needs at least two values per channel")
        mu = xd.mean(axis=(0, 2, 3))
        xc = xd - mu[:, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
    else:
        mu = np.asarray(running_mean, dtype=xd.dtype)
        var = np.asarray(running_var, dtype=xd.dtype)
        xc = xd - mu[:, None, None]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv[:, None, None]
    out = xhat * gd + shift.data[:, None, None]

    def grad_fn(g):
        gscale = (g * xhat).sum(axis=(0, 2, 3)) if scale.requires_grad else None
        gshift = g.sum(axis=(0, 2, 3)) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                s1 = dxhat.mean(axis=(0, 2, 3))[:, None, None]
                s2 = (dxhat * xhat).mean(axis=(0, 2, 3))[:, None, None]
                gx = (dxhat - s1 - xhat * s2) * inv[:, None, None]
            else:
                gx = dxhat * inv[:, None, None]
        return gx, gscale, gshift

    res = _result(out, (x, scale, shift), grad_fn)
    if training:
        return res, mu, var
    return res, None, None


def bilinear_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """[dst, src] interpolation weights with half-pixel centers and edge clamping."""
    a = np.zeros((dst, src), dtype=dtype)
    for i in range(dst):
        pos = (i + 0.5) * src / dst - 0.5
        pos = min(max(pos, 0.0), src - 1.0)
        i0 = int(math.floor(pos))
        i1 = min(i0 + 1, src - 1)
        frac = pos - i0
        a[i, i0] += 1.0 - frac
        a[i, i1] += frac
    return a


def upsample_bilinear(x: Tensor, target: tuple[int, int]) -> Tensor:
    b, c, h, w = x.shape
    ht, wt = target
    if ht < h or wt < w:
        raise ShapeError(f"bilinear up-sampling cannot shrink {h}x{w} to {ht}x{wt}")
    if (ht, wt) == (h, w):
        return _result(x.data.copy(), (x,), lambda g: (g,))
    ah = bilinear_matrix(h, ht, x.dtype)
    aw = bilinear_matrix(w, wt, x.dtype)
    out = np.matmul(ah, np.matmul(x.data, aw.T))
    _tally("resize", 2 * b * c * (h * w * wt + ht * h * wt))
    return _result(out, (x,), lambda g: (np.matmul(ah.T, np.matmul(g, aw)),))


def _windows(size: int, target: int) -> list[tuple[int, int]]:
    return [((i * size) // target, -((-(i + 1) * size) // target)) for i in range(target)]


def adaptive_max_pool(x: Tensor, target: tuple[int, int]) -> Tensor:
    """Max over ``target`` contiguous windows per axis; first maximum wins ties."""
    b, c, h, w = x.shape
    ht, wt = target
    if ht > h or wt > w or ht < 1 or wt < 1:
        raise ShapeError(f"max-pool down-sampling cannot grow {h}x{w} to {ht}x{wt}")
    xd = x.data
    _tally("resize", xd.size)
    if h % ht == 0 and w % wt == 0:
        kh, kw = h // ht, w // wt
        blocks = xd.reshape(b, c, ht, kh, wt, kw).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ht, wt, kh * kw)
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

        def grad_fn(g):
            gb = np.zeros(blocks.shape, dtype=g.dtype)
            np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
            return (gb.reshape(b, c, ht, wt, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w),)

        return _result(out, (x,), grad_fn)

    rows, cols = _windows(h, ht), _windows(w, wt)
    out = np.empty((b, c, ht, wt), dtype=xd.dtype)
    where = []
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            win = xd[:, :, r0:r1, c0:c1].reshape(b, c, -1)
            k = win.argmax(axis=-1)
            out[:, :, i, j] = np.take_along_axis(win, k[..., None], axis=-1)[..., 0]
            where.append((i, j, r0, c0, c1 - c0, k))

    def grad_fn_general(g):
        gx = np.zeros(xd.shape, dtype=g.dtype)
        bi, ci = np.meshgrid(np.arange(b), np.arange(c), indexing="ij")
        for i, j, r0, c0, width, k in where:
            np.add.at(gx, (bi, ci, r0 + k // width, c0 + k % width), g[:, :, i, j])
        return (gx,)

    return _result(out, (x,), grad_fn_general)


def resize(x: Tensor, target: tuple[int, int], mode: str) -> Tensor:
    if mode == "bilinear_up":
        return upsample_bilinear(x, target)
    if mode == "maxpool_down":
        return adaptive_max_pool(x, target)
    raise ValueError(f"unknown resize mode {mode!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("global_avg_pool expects 4-D input")
    return mean(x, axes=(2, 3))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear cannot map {x.shape} with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    _tally("linear", 2 * xd.shape[0] * wd.shape[0] * wd.shape[1])
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _result(out, parents, grad_fn)


def infer_shape(kind: str, shape: tuple[int, ...], **cfg) -> tuple[int, ...]:
    """Output shape of a layer kernel, computed without running it."""
    if kind == "conv2d":
        b, ci, h, w = shape
        co, k = cfg["out_channels"], cfg["kernel"]
        s, p = cfg.get("stride", 1), cfg.get("padding", 0)
        return (b, co, _out_extent(h, k, s, p), _out_extent(w, k, s, p))
    if kind == "depthwise_separable_conv":
        b, _, h, w = shape
        return (b, cfg["out_channels"], h, w)
    if kind == "batch_norm":
        return tuple(shape)
    if kind == "resize":
        return tuple(shape[:2]) + tuple(cfg["target"])
    if kind == "global_avg_pool":
        return tuple(shape[:2])
    if kind == "linear":
        return (shape[0], cfg["out_features"])
    raise ValueError(f"unknown layer kind {kind!r}")
