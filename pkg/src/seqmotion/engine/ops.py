"""Structured operations: convolutions, dense layers, sampling, filters.

2-d convolutions are im2col + BLAS matmul; the transposed convolution is
the exact adjoint of ``conv2d`` with the same padding geometry, so encoder
and decoder strides mirror each other. Bilinear grid sampling delegates to
:mod:`seqmotion.kernels` (compiled core or numpy fallback).
"""

from __future__ import annotations

import numpy as np

from .. import kernels
from .tensor import Tensor, _accum, _make, as_tensor


def _same_geometry(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, c: int, hp: int, wp: int, k: int, s: int,
            ho: int, wo: int) -> np.ndarray:
    n = cols.shape[0]
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += cols6[:, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2-d convolution of ``x[N,C,H,W]`` with ``w[F,C,k,k]``.

    ``padding='same'`` keeps ``ceil(size/stride)`` per axis; ``'valid'``
    applies no padding. Gradients reach input, kernel and bias.
    """
    x, w = as_tensor(x), as_tensor(w)
    n, c, h, wd = x.data.shape
    f, cw, k, k2 = w.data.shape
    if cw != c:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {cw}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if padding == "same":
        ho, pt, pb = _same_geometry(h, k, stride)
        wo, pl, pr = _same_geometry(wd, k, stride)
    elif padding == "valid":
        ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if pt + pb + pl + pr else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = w.data.reshape(f, c * k * k)
    y = np.matmul(w2, cols).reshape(n, f, ho, wo)
    if b is not None:
        b = as_tensor(b)
        y = y + b.data.reshape(1, f, 1, 1)
        parents = (x, w, b)
    else:
        parents = (x, w)

    def bwd(g):
        gy = g.reshape(n, f, ho * wo)
        if w.requires_grad:
            gw = np.matmul(gy, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(w, gw.reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, gy.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(w2.T, gy)
            gxp = _col2im(gcols, c, h + pt + pb, wd + pl + pr, k, stride, ho, wo)
            _accum(x, gxp[:, :, pt:pt + h, pl:pl + wd])

    return _make(y, parents, bwd)


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 2) -> Tensor:
    """Transposed convolution: adjoint of same-padded ``conv2d`` at ``stride``.

    ``x[N,F,h,w]`` with ``w[F,C,k,k]`` gives ``[N,C,h*stride,w*stride]``.
    """
    x, w = as_tensor(x), as_tensor(w)
    n, f, h, wd = x.data.shape
    fw, c, k, _ = w.data.shape
    if fw != f:
        raise ValueError(f"conv2d_transpose: input has {f} channels but kernel expects {fw}")
    ho, wo = h * stride, wd * stride
    _, pt, pb = _same_geometry(ho, k, stride)
    _, pl, pr = _same_geometry(wo, k, stride)

    w2 = w.data.reshape(f, c * k * k)
    x2 = x.data.reshape(n, f, h * wd)
    cols = np.matmul(w2.T, x2)
    yp = _col2im(cols, c, ho + pt + pb, wo + pl + pr, k, stride, h, wd)
    y = yp[:, :, pt:pt + ho, pl:pl + wo]
    if b is not None:
        b = as_tensor(b)
        y = y + b.data.reshape(1, c, 1, 1)
        parents = (x, w, b)
    else:
        parents = (x, w)

    def bwd(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        gcols = _im2col(gp, k, stride, h, wd)
        if x.requires_grad:
            _accum(x, np.matmul(w2, gcols).reshape(x.data.shape))
        if w.requires_grad:
            gw = np.matmul(x2, gcols.transpose(0, 2, 1)).sum(axis=0)
            _accum(w, gw.reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))

    return _make(y, parents, bwd)


def conv1d_dilated(x: Tensor, w: Tensor, b: Tensor | None, dilation: int = 1) -> Tensor:
    """Non-causal dilated 1-d convolution of ``x[C,T]`` with ``w[F,C,3]``.

    Taps sit at offsets ``{-dilation, 0, +dilation}`` with zero padding, so
    the output keeps length T.
    """
    x, w = as_tensor(x), as_tensor(w)
    c, t = x.data.shape
    f, cw, k = w.data.shape
    if t < 1:
        raise ValueError("conv1d_dilated: sequence length must be >= 1")
    if cw != c:
        raise ValueError(f"conv1d_dilated: input has {c} channels but kernel expects {cw}")
    if k != 3:
        raise ValueError(f"conv1d_dilated: kernel size must be 3, got {k}")
    d = int(dilation)

    cols = np.zeros((c, 3, t), dtype=x.data.dtype)
    cols[:, 1] = x.data
    if t > d:
        cols[:, 0, d:] = x.data[:, :t - d]
        cols[:, 2, :t - d] = x.data[:, d:]
    w2 = w.data.reshape(f, c * 3)
    y = w2 @ cols.reshape(c * 3, t)
    if b is not None:
        b = as_tensor(b)
        y = y + b.data[:, None]
        parents = (x, w, b)
    else:
        parents = (x, w)

    def bwd(g):
        if w.requires_grad:
            _accum(w, (g @ cols.reshape(c * 3, t).T).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=1))
        if x.requires_grad:
            gcols = (w2.T @ g).reshape(c, 3, t)
            gx = gcols[:, 1].copy()
            if t > d:
                gx[:, :t - d] += gcols[:, 0, d:]
                gx[:, d:] += gcols[:, 2, :t - d]
            _accum(x, gx)

    return _make(y, parents, bwd)


def dense(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """Affine map ``x @ w.T + b`` for ``x[n]`` or batched ``x[N,n]``."""
    x, w = as_tensor(x), as_tensor(w)
    m, nin = w.data.shape
    if x.data.shape[-1] != nin:
        raise ValueError(f"dense: input size {x.data.shape[-1]} != weight columns {nin}")
    y = x.data @ w.data.T
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (m,):
            raise ValueError(f"dense: bias size {b.data.shape} != weight rows {m}")
        y = y + b.data
        parents = (x, w, b)
    else:
        parents = (x, w)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g @ w.data)
        if w.requires_grad:
            gw = g.T @ x.data if x.data.ndim == 2 else np.outer(g, x.data)
            _accum(w, gw)
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=0) if g.ndim == 2 else g)

    return _make(y, parents, bwd)


def grid_sample(src: Tensor, coords: Tensor) -> Tensor:
    """Bilinear sampling of ``src[N,C,H,W]`` at ``coords[N,2,H,W]``.

    ``coords[:,0]`` are row and ``coords[:,1]`` column positions in pixel
    units; out-of-grid positions clamp to the border. Differentiable in
    both arguments.
    """
    src, coords = as_tensor(src), as_tensor(coords)
    if src.data.shape[0] != coords.data.shape[0] or src.data.shape[2:] != coords.data.shape[2:]:
        raise ValueError(
            f"grid_sample: source grid {src.data.shape} does not match coords {coords.data.shape}")
    rows, cols = coords.data[:, 0], coords.data[:, 1]
    out = kernels.gather_bilinear(src.data, rows, cols)

    def bwd(g):
        gsrc, grow, gcol = kernels.gather_bilinear_bwd(
            src.data, rows, cols, g,
            need_src_grad=src.requires_grad, need_coord_grad=coords.requires_grad)
        if src.requires_grad:
            _accum(src, gsrc)
        if coords.requires_grad:
            _accum(coords, np.stack([grow, gcol], axis=1))

    return _make(out, (src, coords), bwd)


def _box1d(x: np.ndarray, r: int, axis: int) -> np.ndarray:
    length = x.shape[axis]
    c = np.cumsum(x, axis=axis)
    hi = np.take(c, np.minimum(np.arange(length) + r, length - 1), axis=axis)
    lo_idx = np.arange(length) - r - 1
    lo = np.take(c, np.maximum(lo_idx, 0), axis=axis)
    sel = [1] * x.ndim
    sel[axis] = length
    lo = lo * (lo_idx >= 0).reshape(sel)
    return hi - lo


def box_filter2d(x: Tensor, radius: int) -> Tensor:
    """Zero-padded moving-window sum of size (2r+1)^2 over the last two axes.

    Self-adjoint, so the backward pass is the same filter.
    """
    x = as_tensor(x)
    y = _box1d(_box1d(x.data, radius, x.data.ndim - 2), radius, x.data.ndim - 1)

    def bwd(g):
        _accum(x, _box1d(_box1d(g, radius, g.ndim - 2), radius, g.ndim - 1))

    return _make(y, (x,), bwd)


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean pooling of ``x[N,C,H,W]`` by an integer factor."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    if h % factor or w % factor:
        raise ValueError(f"avg_pool2d: extent {h}x{w} not divisible by {factor}")
    y = x.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))

    def bwd(g):
        gg = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3) / (factor * factor)
        _accum(x, gg)

    return _make(y, (x,), bwd)
