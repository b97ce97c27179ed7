# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for distance and softmax math.

Every function here has a numpy twin in ``_kernels_py`` with the same
signature; ``protofssl.kernels`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

ctypedef fused real:
    float
    double


def pairwise_sq_dist(real[:, ::1] a, real[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], d = a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    if b.shape[1] != d:
        raise ValueError(f"inner dimension mismatch: {d} vs {b.shape[1]}")
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, m), dtype=dtype)
    cdef real[:, ::1] o = out
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                diff = <double>a[i, k] - <double>b[j, k]
                acc += diff * diff
            o[i, j] = <real>acc
    return out


def log_softmax_rows(real[:, ::1] z):
    cdef Py_ssize_t n = z.shape[0], m = z.shape[1]
    cdef Py_ssize_t i, j
    cdef double mx, s, lse
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, m), dtype=dtype)
    cdef real[:, ::1] o = out
    for i in range(n):
        mx = z[i, 0]
        for j in range(1, m):
            if z[i, j] > mx:
                mx = z[i, j]
        s = 0.0
        for j in range(m):
            s += exp(<double>z[i, j] - mx)
        lse = mx + log(s)
        for j in range(m):
            o[i, j] = <real>(<double>z[i, j] - lse)
    return out


def segment_mean(real[:, ::1] x, cnp.int64_t[::1] seg, Py_ssize_t n_seg):
    """Row means of ``x`` grouped by ``seg``; empty segments stay zero."""
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, k, s
    if seg.shape[0] != n:
        raise ValueError("segment ids must match the number of rows")
    acc = np.zeros((n_seg, d), dtype=np.float64)
    counts = np.zeros(n_seg, dtype=np.int64)
    cdef double[:, ::1] a = acc
    cdef cnp.int64_t[::1] c = counts
    for i in range(n):
        s = seg[i]
        if s < 0 or s >= n_seg:
            raise ValueError(f"segment id {s} out of range [0, {n_seg})")
        c[s] += 1
        for k in range(d):
            a[s, k] += x[i, k]
    for s in range(n_seg):
        if c[s] > 0:
            for k in range(d):
                a[s, k] /= c[s]
    dtype = np.float32 if real is float else np.float64
    return acc.astype(dtype), counts
