# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution/pooling kernels (direct loops, no temporaries).

Contract mirrors kernels_numpy: float64 C-contiguous NHWC arrays, 3x3
same padding, 2x2/stride-2 max pooling with first-max-wins ties and
row-major window argmax indices.
"""

import numpy as np

cimport cython


def conv3x3_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w, double[::1] b):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t ci = x.shape[3], co = w.shape[3]
    y_arr = np.empty((n, h, wd, co))
    cdef double[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t bi, i, j, kh, kw, c_in, c_out, ii, jj
    cdef double xv
    with nogil:
        for bi in range(n):
            for i in range(h):
                for j in range(wd):
                    for c_out in range(co):
                        y[bi, i, j, c_out] = b[c_out]
                    for kh in range(3):
                        ii = i + kh - 1
                        if ii < 0 or ii >= h:
                            continue
                        for kw in range(3):
                            jj = j + kw - 1
                            if jj < 0 or jj >= wd:
                                continue
                            for c_in in range(ci):
                                xv = x[bi, ii, jj, c_in]
                                for c_out in range(co):
                                    y[bi, i, j, c_out] += xv * w[kh, kw, c_in, c_out]
    return y_arr


def conv3x3_backward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                     double[:, :, :, ::1] dy):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t ci = x.shape[3], co = w.shape[3]
    dx_arr = np.zeros((n, h, wd, ci))
    dw_arr = np.zeros((3, 3, ci, co))
    db_arr = np.zeros(co)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef Py_ssize_t bi, i, j, kh, kw, c_in, c_out, ii, jj
    cdef double xv, acc, g
    with nogil:
        for bi in range(n):
            for i in range(h):
                for j in range(wd):
                    for c_out in range(co):
                        db[c_out] += dy[bi, i, j, c_out]
                    for kh in range(3):
                        ii = i + kh - 1
                        if ii < 0 or ii >= h:
                            continue
                        for kw in range(3):
                            jj = j + kw - 1
                            if jj < 0 or jj >= wd:
                                continue
                            for c_in in range(ci):
                                xv = x[bi, ii, jj, c_in]
                                acc = 0.0
                                for c_out in range(co):
                                    g = dy[bi, i, j, c_out]
                                    acc += w[kh, kw, c_in, c_out] * g
                                    dw[kh, kw, c_in, c_out] += xv * g
                                dx[bi, ii, jj, c_in] += acc
    return dx_arr, dw_arr, db_arr


def maxpool2_forward(double[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], wd = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t hh = h // 2, wh = wd // 2
    y_arr = np.empty((n, hh, wh, c))
    idx_arr = np.zeros((n, hh, wh, c), dtype=np.uint8)
    cdef double[:, :, :, ::1] y = y_arr
    cdef unsigned char[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t bi, i, j, ch, p, di, dj
    cdef double best, v
    cdef unsigned char best_p
    with nogil:
        for bi in range(n):
            for i in range(hh):
                for j in range(wh):
                    for ch in range(c):
                        best = x[bi, 2 * i, 2 * j, ch]
                        best_p = 0
                        for p in range(1, 4):
                            di = p >> 1
                            dj = p & 1
                            v = x[bi, 2 * i + di, 2 * j + dj, ch]
                            if v > best:
                                best = v
                                best_p = <unsigned char> p
                        y[bi, i, j, ch] = best
                        idx[bi, i, j, ch] = best_p
    return y_arr, idx_arr


def maxpool2_backward(double[:, :, :, ::1] dy, unsigned char[:, :, :, ::1] idx):
    cdef Py_ssize_t n = dy.shape[0], hh = dy.shape[1], wh = dy.shape[2], c = dy.shape[3]
    dx_arr = np.zeros((n, 2 * hh, 2 * wh, c))
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t bi, i, j, ch, p
    with nogil:
        for bi in range(n):
            for i in range(hh):
                for j in range(wh):
                    for ch in range(c):
                        p = idx[bi, i, j, ch]
                        dx[bi, 2 * i + (p >> 1), 2 * j + (p & 1), ch] = dy[bi, i, j, ch]
    return dx_arr
