# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels for the loop-bound hot paths: depthwise convolution
and bilinear resize (forward + backward). The non-overlapping transposed
convolution is a reshape of one matrix product, so the BLAS-backed
reference implementation is the fast path for it in both backends.

Signatures and float32 semantics mirror pixelsail.kernels.reference; the
test suite asserts agreement between the two backends.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef cnp.float32_t f32


def depthwise_conv2d_fwd(cnp.ndarray[f32, ndim=3] x, cnp.ndarray[f32, ndim=3] w):
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t k = w.shape[1], p = w.shape[1] // 2
    cdef cnp.ndarray[f32, ndim=3] out = np.zeros((c, h, wd), dtype=np.float32)
    cdef f32[:, :, :] xv = x, wv = w, ov = out
    cdef Py_ssize_t ch, y, xx, dy, dx
    cdef Py_ssize_t sy, sx
    cdef f32 acc
    with nogil:
        for ch in range(c):
            for y in range(h):
                for xx in range(wd):
                    acc = 0
                    for dy in range(k):
                        sy = y + dy - p
                        if sy < 0 or sy >= h:
                            continue
                        for dx in range(k):
                            sx = xx + dx - p
                            if sx < 0 or sx >= wd:
                                continue
                            acc += xv[ch, sy, sx] * wv[ch, dy, dx]
                    ov[ch, y, xx] = acc
    return out


def depthwise_conv2d_bwd(cnp.ndarray[f32, ndim=3] x, cnp.ndarray[f32, ndim=3] w,
                         cnp.ndarray[f32, ndim=3] g):
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t k = w.shape[1], p = w.shape[1] // 2
    cdef cnp.ndarray[f32, ndim=3] gx = np.zeros((c, h, wd), dtype=np.float32)
    cdef cnp.ndarray[f32, ndim=3] gw = np.zeros((c, k, k), dtype=np.float32)
    cdef f32[:, :, :] xv = x, wv = w, gv = g, gxv = gx, gwv = gw
    cdef Py_ssize_t ch, y, xx, dy, dx
    cdef Py_ssize_t sy, sx
    cdef f32 gout
    with nogil:
        for ch in range(c):
            for y in range(h):
                for xx in range(wd):
                    gout = gv[ch, y, xx]
                    for dy in range(k):
                        sy = y + dy - p
                        if sy < 0 or sy >= h:
                            continue
                        for dx in range(k):
                            sx = xx + dx - p
                            if sx < 0 or sx >= wd:
                                continue
                            gwv[ch, dy, dx] += xv[ch, sy, sx] * gout
                            gxv[ch, sy, sx] += wv[ch, dy, dx] * gout
    return gx, gw


cdef void _resize_coords(Py_ssize_t n_in, Py_ssize_t n_out,
                         Py_ssize_t[:] lo0, Py_ssize_t[:] lo1, f32[:] frac) nogil:
    cdef Py_ssize_t i, lo
    cdef double src, scale = (<double> n_in) / (<double> n_out)
    for i in range(n_out):
        src = ((<double> i) + 0.5) * scale - 0.5
        lo = <Py_ssize_t> (src // 1.0)
        frac[i] = <f32> (src - lo)
        lo0[i] = min(max(lo, 0), n_in - 1)
        lo1[i] = min(max(lo + 1, 0), n_in - 1)


def bilinear_resize_fwd(cnp.ndarray[f32, ndim=3] x, int out_h, int out_w):
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef cnp.ndarray[f32, ndim=3] out = np.zeros((c, out_h, out_w), dtype=np.float32)
    y0 = np.zeros(out_h, dtype=np.intp); y1 = np.zeros(out_h, dtype=np.intp)
    x0 = np.zeros(out_w, dtype=np.intp); x1 = np.zeros(out_w, dtype=np.intp)
    fy = np.zeros(out_h, dtype=np.float32); fx = np.zeros(out_w, dtype=np.float32)
    cdef Py_ssize_t[:] y0v = y0, y1v = y1, x0v = x0, x1v = x1
    cdef f32[:] fyv = fy, fxv = fx
    cdef f32[:, :, :] xv = x, ov = out
    cdef Py_ssize_t ch, i, j
    cdef f32 top, bot
    with nogil:
        _resize_coords(h, out_h, y0v, y1v, fyv)
        _resize_coords(wd, out_w, x0v, x1v, fxv)
        for ch in range(c):
            for i in range(out_h):
                for j in range(out_w):
                    top = xv[ch, y0v[i], x0v[j]] * (1 - fxv[j]) + xv[ch, y0v[i], x1v[j]] * fxv[j]
                    bot = xv[ch, y1v[i], x0v[j]] * (1 - fxv[j]) + xv[ch, y1v[i], x1v[j]] * fxv[j]
                    ov[ch, i, j] = top * (1 - fyv[i]) + bot * fyv[i]
    return out


def bilinear_resize_bwd(int in_h, int in_w, cnp.ndarray[f32, ndim=3] g):
    cdef Py_ssize_t c = g.shape[0], out_h = g.shape[1], out_w = g.shape[2]
    cdef cnp.ndarray[f32, ndim=3] gx = np.zeros((c, in_h, in_w), dtype=np.float32)
    y0 = np.zeros(out_h, dtype=np.intp); y1 = np.zeros(out_h, dtype=np.intp)
    x0 = np.zeros(out_w, dtype=np.intp); x1 = np.zeros(out_w, dtype=np.intp)
    fy = np.zeros(out_h, dtype=np.float32); fx = np.zeros(out_w, dtype=np.float32)
    cdef Py_ssize_t[:] y0v = y0, y1v = y1, x0v = x0, x1v = x1
    cdef f32[:] fyv = fy, fxv = fx
    cdef f32[:, :, :] gv = g, gxv = gx
    cdef Py_ssize_t ch, i, j
    cdef f32 gout
    with nogil:
        _resize_coords(in_h, out_h, y0v, y1v, fyv)
        _resize_coords(in_w, out_w, x0v, x1v, fxv)
        for ch in range(c):
            for i in range(out_h):
                for j in range(out_w):
                    gout = gv[ch, i, j]
                    gxv[ch, y0v[i], x0v[j]] += gout * (1 - fyv[i]) * (1 - fxv[j])
                    gxv[ch, y0v[i], x1v[j]] += gout * (1 - fyv[i]) * fxv[j]
                    gxv[ch, y1v[i], x0v[j]] += gout * fyv[i] * (1 - fxv[j])
                    gxv[ch, y1v[i], x1v[j]] += gout * fyv[i] * fxv[j]
    return gx
