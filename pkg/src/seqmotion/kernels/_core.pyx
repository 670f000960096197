# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled sampling kernels (hot path of warping and exponentiation).

Mirrors the contracts of ``fallback.py``: border-clamped bilinear gather,
its gradients, and nearest-neighbour gather.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double

COMPILED = True


def gather_bilinear(src, rows, cols):
    src = np.ascontiguousarray(src)
    rows = np.ascontiguousarray(rows, dtype=src.dtype)
    cols = np.ascontiguousarray(cols, dtype=src.dtype)
    out = np.empty_like(src)
    if src.dtype == np.float32:
        _gather_f(src, rows, cols, out)
    else:
        _gather_d(src, rows, cols, out)
    return out


def gather_bilinear_bwd(src, rows, cols, gout, need_src_grad=True, need_coord_grad=True):
    src = np.ascontiguousarray(src)
    rows = np.ascontiguousarray(rows, dtype=src.dtype)
    cols = np.ascontiguousarray(cols, dtype=src.dtype)
    gout = np.ascontiguousarray(gout, dtype=src.dtype)
    gsrc = np.zeros_like(src) if need_src_grad else None
    grows = np.zeros_like(rows) if need_coord_grad else None
    gcols = np.zeros_like(cols) if need_coord_grad else None
    if src.dtype == np.float32:
        _gather_bwd_f(src, rows, cols, gout, gsrc, grows, gcols,
                      1 if need_src_grad else 0, 1 if need_coord_grad else 0)
    else:
        _gather_bwd_d(src, rows, cols, gout, gsrc, grows, gcols,
                      1 if need_src_grad else 0, 1 if need_coord_grad else 0)
    return gsrc, grows, gcols


def gather_nearest(src, rows, cols):
    src = np.ascontiguousarray(src)
    N, C, H, W = src.shape
    ri = np.clip(np.rint(rows), 0, H - 1).astype(np.int64)
    ci = np.clip(np.rint(cols), 0, W - 1).astype(np.int64)
    flat = src.reshape(N, C, H * W)
    idx = (ri * W + ci).reshape(N, 1, H * W)
    return np.take_along_axis(flat, idx, axis=2).reshape(N, C, H, W)


cdef void _gather_core(real[:, :, :, ::1] src, real[:, :, ::1] rows, real[:, :, ::1] cols,
                       real[:, :, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t N = src.shape[0], C = src.shape[1], H = src.shape[2], W = src.shape[3]
    cdef Py_ssize_t n, ch, i, j, r0, c0
    cdef real r, c, fr, fc, w00, w01, w10, w11
    for n in range(N):
        for i in range(H):
            for j in range(W):
                r = rows[n, i, j]
                c = cols[n, i, j]
                if r < 0: r = 0
                if r > H - 1: r = H - 1
                if c < 0: c = 0
                if c > W - 1: c = W - 1
                r0 = <Py_ssize_t>r
                if r0 > H - 2: r0 = H - 2
                c0 = <Py_ssize_t>c
                if c0 > W - 2: c0 = W - 2
                fr = r - r0
                fc = c - c0
                w00 = (1 - fr) * (1 - fc)
                w01 = (1 - fr) * fc
                w10 = fr * (1 - fc)
                w11 = fr * fc
                for ch in range(C):
                    out[n, ch, i, j] = (w00 * src[n, ch, r0, c0]
                                        + w01 * src[n, ch, r0, c0 + 1]
                                        + w10 * src[n, ch, r0 + 1, c0]
                                        + w11 * src[n, ch, r0 + 1, c0 + 1])


cdef void _gather_bwd_core(real[:, :, :, ::1] src, real[:, :, ::1] rows, real[:, :, ::1] cols,
                           real[:, :, :, ::1] gout, real[:, :, :, ::1] gsrc,
                           real[:, :, ::1] grows, real[:, :, ::1] gcols,
                           int need_src, int need_coord) noexcept nogil:
    cdef Py_ssize_t N = src.shape[0], C = src.shape[1], H = src.shape[2], W = src.shape[3]
    cdef Py_ssize_t n, ch, i, j, r0, c0
    cdef real r, c, fr, fc, g, gr, gc, v00, v01, v10, v11
    cdef bint in_r, in_c
    for n in range(N):
        for i in range(H):
            for j in range(W):
                r = rows[n, i, j]
                c = cols[n, i, j]
                in_r = 0 < r < H - 1
                in_c = 0 < c < W - 1
                if r < 0: r = 0
                if r > H - 1: r = H - 1
                if c < 0: c = 0
                if c > W - 1: c = W - 1
                r0 = <Py_ssize_t>r
                if r0 > H - 2: r0 = H - 2
                c0 = <Py_ssize_t>c
                if c0 > W - 2: c0 = W - 2
                fr = r - r0
                fc = c - c0
                gr = 0
                gc = 0
                for ch in range(C):
                    g = gout[n, ch, i, j]
                    if need_src:
                        gsrc[n, ch, r0, c0] += (1 - fr) * (1 - fc) * g
                        gsrc[n, ch, r0, c0 + 1] += (1 - fr) * fc * g
                        gsrc[n, ch, r0 + 1, c0] += fr * (1 - fc) * g
                        gsrc[n, ch, r0 + 1, c0 + 1] += fr * fc * g
                    if need_coord:
                        v00 = src[n, ch, r0, c0]
                        v01 = src[n, ch, r0, c0 + 1]
                        v10 = src[n, ch, r0 + 1, c0]
                        v11 = src[n, ch, r0 + 1, c0 + 1]
                        gr += g * ((1 - fc) * (v10 - v00) + fc * (v11 - v01))
                        gc += g * ((1 - fr) * (v01 - v00) + fr * (v11 - v10))
                if need_coord:
                    grows[n, i, j] = gr if in_r else 0
                    gcols[n, i, j] = gc if in_c else 0


def _gather_f(float[:, :, :, ::1] src, float[:, :, ::1] rows, float[:, :, ::1] cols,
              float[:, :, :, ::1] out):
    with nogil:
        _gather_core(src, rows, cols, out)


def _gather_d(double[:, :, :, ::1] src, double[:, :, ::1] rows, double[:, :, ::1] cols,
              double[:, :, :, ::1] out):
    with nogil:
        _gather_core(src, rows, cols, out)


def _gather_bwd_f(float[:, :, :, ::1] src, float[:, :, ::1] rows, float[:, :, ::1] cols,
                  float[:, :, :, ::1] gout, gsrc, grows, gcols, int need_src, int need_coord):
    cdef float[:, :, :, ::1] gs = gsrc if gsrc is not None else src[:0]
    cdef float[:, :, ::1] gr = grows if grows is not None else rows[:0]
    cdef float[:, :, ::1] gc = gcols if gcols is not None else cols[:0]
    with nogil:
        _gather_bwd_core(src, rows, cols, gout, gs, gr, gc, need_src, need_coord)


def _gather_bwd_d(double[:, :, :, ::1] src, double[:, :, ::1] rows, double[:, :, ::1] cols,
                  double[:, :, :, ::1] gout, gsrc, grows, gcols, int need_src, int need_coord):
    cdef double[:, :, :, ::1] gs = gsrc if gsrc is not None else src[:0]
    cdef double[:, :, ::1] gr = grows if grows is not None else rows[:0]
    cdef double[:, :, ::1] gc = gcols if gcols is not None else cols[:0]
    with nogil:
        _gather_bwd_core(src, rows, cols, gout, gs, gr, gc, need_src, need_coord)
