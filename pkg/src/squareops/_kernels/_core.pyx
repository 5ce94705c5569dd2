# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution rearrangement kernels.

Same contracts as `fallback.py`. col2im accumulates tap-major (ki, kj outer)
exactly like the fallback's slice loop, so both backends produce bitwise
identical gradients.
"""

import numpy as np


def im2col(double[:, :, :, ::1] xpad, int k, int stride, int oh, int ow):
    cdef Py_ssize_t n = xpad.shape[0]
    cdef Py_ssize_t c = xpad.shape[3]
    out_arr = np.empty((n * oh * ow, k * k * c), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, oi, oj, ki, kj, ch, row, col
    for b in range(n):
        for oi in range(oh):
            for oj in range(ow):
                row = (b * oh + oi) * ow + oj
                col = 0
                for ki in range(k):
                    for kj in range(k):
                        for ch in range(c):
                            out[row, col] = xpad[b, oi * stride + ki, oj * stride + kj, ch]
                            col += 1
    return out_arr


def col2im(double[:, ::1] cols, Py_ssize_t n, Py_ssize_t hp, Py_ssize_t wp, Py_ssize_t c,
           int k, int stride, int oh, int ow):
    gx_arr = np.zeros((n, hp, wp, c), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, oi, oj, ki, kj, ch, row, col
    for ki in range(k):
        for kj in range(k):
            for b in range(n):
                for oi in range(oh):
                    for oj in range(ow):
                        row = (b * oh + oi) * ow + oj
                        col = (ki * k + kj) * c
                        for ch in range(c):
                            gx[b, oi * stride + ki, oj * stride + kj, ch] += cols[row, col + ch]
    return gx_arr
