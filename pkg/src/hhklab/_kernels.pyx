# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tree passes. Same signatures and results as ``_kernels_py``."""

import numpy as np


def forward_satisfaction(double[::1] lump, double[::1] rate, double[::1] decay,
                         double[::1] gain, double[::1] lump_w, double y0, int n):
    cdef Py_ssize_t size = lump.shape[0]
    out_arr = np.empty(size, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, k, s, m, c
    cdef double base, d, g, lw
    out[0] = y0 + lump_w[0] * lump[0]
    for i in range(n):
        s = (1 << i) - 1
        m = 1 << i
        d = decay[i]
        g = gain[i]
        lw = lump_w[i + 1]
        for k in range(s, s + m):
            base = out[k] * d + rate[k] * g
            c = 2 * k + 1
            out[c] = base + lw * lump[c]
            out[c + 1] = base + lw * lump[c + 1]
    return out_arr


def backward_accumulate(src, double p, int n, int stop=0):
    out_arr = np.array(src, dtype=np.float64, copy=True)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, k, s, m
    cdef double q = 1.0 - p
    for i in range(n - 1, stop - 1, -1):
        s = (1 << i) - 1
        m = 1 << i
        for k in range(s, s + m):
            out[k] += q * out[2 * k + 1] + p * out[2 * k + 2]
    return out_arr


def forward_product(double[::1] factor, int n):
    out_arr = np.empty(factor.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, k, s, m
    cdef double v
    out[0] = 1.0
    for i in range(n):
        s = (1 << i) - 1
        m = 1 << i
        for k in range(s, s + m):
            v = out[k] * factor[k]
            out[2 * k + 1] = v
            out[2 * k + 2] = v
    return out_arr


def forward_sum(double[::1] a, double[::1] b, int n):
    out_arr = np.empty(a.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, k, s, m
    cdef double v
    out[0] = b[0]
    for i in range(n):
        s = (1 << i) - 1
        m = 1 << i
        for k in range(s, s + m):
            v = out[k] + a[k]
            out[2 * k + 1] = v + b[2 * k + 1]
            out[2 * k + 2] = v + b[2 * k + 2]
    return out_arr


def running_max(double[::1] level, double floor0, double[::1] decay, int n, int start=0):
    out_arr = np.zeros(level.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, k, s, m, c
    cdef double v, d
    s = (1 << start) - 1
    m = 1 << start
    for k in range(s, s + m):
        out[k] = floor0 if floor0 > level[k] else level[k]
    for i in range(start, n):
        s = (1 << i) - 1
        m = 1 << i
        d = decay[i]
        for k in range(s, s + m):
            v = out[k] * d
            c = 2 * k + 1
            out[c] = v if v > level[c] else level[c]
            out[c + 1] = v if v > level[c + 1] else level[c + 1]
    return out_arr
