# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: patch extraction for convolution and ranked-list scoring."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    cols_arr = np.zeros((n * ho * wo, c * kh * kw), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, ix, row, col
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        iy = oy * stride - pad + i
                        for j in range(kw):
                            ix = ox * stride - pad + j
                            if 0 <= iy < h and 0 <= ix < w:
                                cols[row, col] = x[b, ch, iy, ix]
                            col += 1
    return cols_arr


def col2im(const double[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h,
           Py_ssize_t w, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, ix, row, col
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        iy = oy * stride - pad + i
                        for j in range(kw):
                            ix = ox * stride - pad + j
                            if 0 <= iy < h and 0 <= ix < w:
                                out[b, ch, iy, ix] += cols[row, col]
                            col += 1
    return out_arr


def ranked_hits(const unsigned char[:, ::1] relevant):
    """Per row of a relevance matrix already in rank order: (AP, first hit index or -1)."""
    cdef Py_ssize_t q = relevant.shape[0], g = relevant.shape[1]
    ap_arr = np.zeros(q, dtype=np.float64)
    first_arr = np.full(q, -1, dtype=np.int64)
    cdef double[::1] ap = ap_arr
    cdef long long[::1] first = first_arr
    cdef Py_ssize_t r, k
    cdef long long hits
    cdef double acc
    for r in range(q):
        hits = 0
        acc = 0.0
        for k in range(g):
            if relevant[r, k]:
                hits += 1
                acc += <double>hits / <double>(k + 1)
                if first[r] < 0:
                    first[r] = k
        if hits > 0:
            ap[r] = acc / <double>hits
    return ap_arr, first_arr
