# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled execution kernels (same signatures as ``_pykernels``)."""
import numpy as np
cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"

ctypedef fused real:
    float
    double


def _im2col(real[:, :, ::1] xpad, int n, int stride, int ho, int wo, real[:, ::1] cols):
    cdef Py_ssize_t c, ky, kx, y, x, row
    cdef Py_ssize_t nc = xpad.shape[0]
    cdef real* dst
    cdef const real* src
    with nogil:
        for c in range(nc):
            for ky in range(n):
                for kx in range(n):
                    row = (c * n + ky) * n + kx
                    for y in range(ho):
                        dst = &cols[row, y * wo]
                        src = &xpad[c, y * stride + ky, kx]
                        if stride == 1:
                            for x in range(wo):
                                dst[x] = src[x]
                        else:
                            for x in range(wo):
                                dst[x] = src[x * stride]


def im2col(xpad, int n, int stride, int ho, int wo):
    xpad = np.ascontiguousarray(xpad)
    cols = np.empty((xpad.shape[0] * n * n, ho * wo), dtype=xpad.dtype)
    _im2col(xpad, n, stride, ho, wo, cols)
    return cols


def _wino_in(real[:, :, ::1] xpad, int th, int tw, real[:, :, ::1] v):
    cdef Py_ssize_t c, i, j, a, b, t
    cdef real d[4][4]
    cdef real r[4][4]
    cdef Py_ssize_t nc = xpad.shape[0]
    for c in range(nc):
        for i in range(th):
            for j in range(tw):
                for a in range(4):
                    for b in range(4):
                        d[a][b] = xpad[c, 2 * i + a, 2 * j + b]
                for b in range(4):
                    r[0][b] = d[0][b] - d[2][b]
                    r[1][b] = d[1][b] + d[2][b]
                    r[2][b] = d[2][b] - d[1][b]
                    r[3][b] = d[1][b] - d[3][b]
                t = i * tw + j
                for a in range(4):
                    v[a * 4 + 0, c, t] = r[a][0] - r[a][2]
                    v[a * 4 + 1, c, t] = r[a][1] + r[a][2]
                    v[a * 4 + 2, c, t] = r[a][2] - r[a][1]
                    v[a * 4 + 3, c, t] = r[a][1] - r[a][3]


def winograd_input(xpad, int th, int tw):
    xpad = np.ascontiguousarray(xpad)
    v = np.empty((16, xpad.shape[0], th * tw), dtype=xpad.dtype)
    _wino_in(xpad, th, tw, v)
    return v


def _wino_out(real[:, :, ::1] m, int th, int tw, real[:, :, ::1] y):
    cdef Py_ssize_t c, i, j, b, t
    cdef real r0[4]
    cdef real r1[4]
    cdef Py_ssize_t nc = m.shape[1]
    for c in range(nc):
        for i in range(th):
            for j in range(tw):
                t = i * tw + j
                for b in range(4):
                    r0[b] = m[b, c, t] + m[4 + b, c, t] + m[8 + b, c, t]
                    r1[b] = m[4 + b, c, t] - m[8 + b, c, t] - m[12 + b, c, t]
                y[c, 2 * i, 2 * j] = r0[0] + r0[1] + r0[2]
                y[c, 2 * i, 2 * j + 1] = r0[1] - r0[2] - r0[3]
                y[c, 2 * i + 1, 2 * j] = r1[0] + r1[1] + r1[2]
                y[c, 2 * i + 1, 2 * j + 1] = r1[1] - r1[2] - r1[3]


def winograd_output(m, int th, int tw):
    m = np.ascontiguousarray(m)
    y = np.empty((m.shape[1], 2 * th, 2 * tw), dtype=m.dtype)
    _wino_out(m, th, tw, y)
    return y


cdef inline void _axpy_row(real* dst, const real* src, Py_ssize_t count, Py_ssize_t step,
                           real w, int unroll) noexcept nogil:
    cdef Py_ssize_t x = 0
    if unroll >= 8:
        while x + 8 <= count:
            dst[x] += w * src[x * step]
            dst[x + 1] += w * src[(x + 1) * step]
            dst[x + 2] += w * src[(x + 2) * step]
            dst[x + 3] += w * src[(x + 3) * step]
            dst[x + 4] += w * src[(x + 4) * step]
            dst[x + 5] += w * src[(x + 5) * step]
            dst[x + 6] += w * src[(x + 6) * step]
            dst[x + 7] += w * src[(x + 7) * step]
            x += 8
    elif unroll >= 4:
        while x + 4 <= count:
            dst[x] += w * src[x * step]
            dst[x + 1] += w * src[(x + 1) * step]
            dst[x + 2] += w * src[(x + 2) * step]
            dst[x + 3] += w * src[(x + 3) * step]
            x += 4
    elif unroll >= 2:
        while x + 2 <= count:
            dst[x] += w * src[x * step]
            dst[x + 1] += w * src[(x + 1) * step]
            x += 2
    while x < count:
        dst[x] += w * src[x * step]
        x += 1


def _pattern(real[:, :, ::1] xpad, real[:, :, ::1] out, const long[::1] k_out,
             const long[::1] k_in, const long[:, ::1] tap_off, real[:, ::1] tap_w,
             int stride, int tile, int unroll):
    cdef Py_ssize_t nk = k_out.shape[0]
    cdef Py_ssize_t ho = out.shape[1], wo = out.shape[2]
    cdef Py_ssize_t y0, y1, k, t, y, o, i, dy, dx
    cdef real w
    with nogil:
        # row tiles keep the touched output rows cache resident across kernels
        y0 = 0
        while y0 < ho:
            y1 = y0 + tile
            if y1 > ho:
                y1 = ho
            for k in range(nk):
                o = k_out[k]
                i = k_in[k]
                for t in range(4):
                    w = tap_w[k, t]
                    dy = tap_off[k, t] // 3
                    dx = tap_off[k, t] % 3
                    for y in range(y0, y1):
                        _axpy_row(&out[o, y, 0], &xpad[i, y * stride + dy, dx],
                                  wo, stride, w, unroll)
            y0 = y1


def pattern_conv(xpad, out, k_out, k_in, tap_off, tap_w, int stride, int tile, int unroll):
    if not out.flags.c_contiguous:
        raise ValueError("out must be C-contiguous")
    xpad = np.ascontiguousarray(xpad, dtype=out.dtype)
    tap_w = np.ascontiguousarray(tap_w, dtype=out.dtype)
    _pattern(xpad, out, np.ascontiguousarray(k_out, dtype=np.int_),
             np.ascontiguousarray(k_in, dtype=np.int_),
             np.ascontiguousarray(tap_off, dtype=np.int_), tap_w,
             stride, max(int(tile), 1), unroll)
    return out
