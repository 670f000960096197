"""Pure-numpy implementations of the sampling kernels.

Same contracts as the compiled module in ``_core.pyx``; used when the
extension is unavailable or when ``SEQMOTION_KERNELS=fallback`` is set.
Coordinates are (row, col) pixel units; sampling outside the grid is
clamped to the border, and coordinate gradients are zeroed wherever the
clamp is active.
"""

import numpy as np

COMPILED = False


def gather_bilinear(src, rows, cols):
    """Sample ``src[N,C,H,W]`` at coordinates ``rows/cols[N,H,W]``."""
    N, C, H, W = src.shape
    r = np.clip(rows, 0.0, H - 1.0)
    c = np.clip(cols, 0.0, W - 1.0)
    r0 = np.minimum(r.astype(np.int64), H - 2)
    c0 = np.minimum(c.astype(np.int64), W - 2)
    fr = (r - r0).reshape(N, 1, H * W)
    fc = (c - c0).reshape(N, 1, H * W)

    flat = src.reshape(N, C, H * W)
    i00 = (r0 * W + c0).reshape(N, 1, H * W)
    v00 = np.take_along_axis(flat, i00, axis=2)
    v01 = np.take_along_axis(flat, i00 + 1, axis=2)
    v10 = np.take_along_axis(flat, i00 + W, axis=2)
    v11 = np.take_along_axis(flat, i00 + W + 1, axis=2)

    out = ((1.0 - fr) * ((1.0 - fc) * v00 + fc * v01)
           + fr * ((1.0 - fc) * v10 + fc * v11))
    return out.reshape(N, C, H, W).astype(src.dtype, copy=False)


def gather_bilinear_bwd(src, rows, cols, gout, need_src_grad=True, need_coord_grad=True):
    """Gradients of :func:`gather_bilinear` w.r.t. source and coordinates.

    Returns ``(gsrc, grows, gcols)``; entries are ``None`` when the
    corresponding ``need_*`` flag is false.
    """
    N, C, H, W = src.shape
    P = H * W
    r = np.clip(rows, 0.0, H - 1.0)
    c = np.clip(cols, 0.0, W - 1.0)
    r0 = np.minimum(r.astype(np.int64), H - 2)
    c0 = np.minimum(c.astype(np.int64), W - 2)
    fr = (r - r0).reshape(N, 1, P)
    fc = (c - c0).reshape(N, 1, P)

    flat = src.reshape(N, C, P)
    i00 = (r0 * W + c0).reshape(N, 1, P)
    g = gout.reshape(N, C, P)

    gsrc = None
    if need_src_grad:
        w00 = (1.0 - fr) * (1.0 - fc)
        w01 = (1.0 - fr) * fc
        w10 = fr * (1.0 - fc)
        w11 = fr * fc
        # scatter-add the four corner contributions over a flat (n, c) index
        base = (np.arange(N * C, dtype=np.int64).reshape(N, C, 1)) * P
        idx = base + i00
        acc = np.zeros(N * C * P, dtype=np.float64)
        for off, w in ((0, w00), (1, w01), (W, w10), (W + 1, w11)):
            acc += np.bincount((idx + off).ravel(), weights=(w * g).reshape(N * C, P).ravel(),
                               minlength=N * C * P)
        gsrc = acc.reshape(N, C, H, W).astype(src.dtype, copy=False)

    grows = gcols = None
    if need_coord_grad:
        v00 = np.take_along_axis(flat, i00, axis=2)
        v01 = np.take_along_axis(flat, i00 + 1, axis=2)
        v10 = np.take_along_axis(flat, i00 + W, axis=2)
        v11 = np.take_along_axis(flat, i00 + W + 1, axis=2)
        dr = (1.0 - fc) * (v10 - v00) + fc * (v11 - v01)
        dc = (1.0 - fr) * (v01 - v00) + fr * (v11 - v10)
        grows = (g * dr).sum(axis=1).reshape(N, H, W)
        gcols = (g * dc).sum(axis=1).reshape(N, H, W)
        in_r = (rows > 0.0) & (rows < H - 1.0)
        in_c = (cols > 0.0) & (cols < W - 1.0)
        grows = np.where(in_r, grows, 0.0).astype(src.dtype, copy=False)
        gcols = np.where(in_c, gcols, 0.0).astype(src.dtype, copy=False)

    return gsrc, grows, gcols


def gather_nearest(src, rows, cols):
    """Nearest-neighbour sampling of ``src[N,C,H,W]``; used for label masks."""
    N, C, H, W = src.shape
    ri = np.clip(np.rint(rows), 0, H - 1).astype(np.int64)
    ci = np.clip(np.rint(cols), 0, W - 1).astype(np.int64)
    flat = src.reshape(N, C, H * W)
    idx = (ri * W + ci).reshape(N, 1, H * W)
    return np.take_along_axis(flat, idx, axis=2).reshape(N, C, H, W)
