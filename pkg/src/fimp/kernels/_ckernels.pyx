# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled segment reductions and neighbor searches.

Every loop here reduces in the same order as the NumPy fallback in
``_pykernels`` so both backends agree bitwise. Do not build with
``-ffast-math``; it would license reassociation.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

ctypedef fused floating:
    float
    double


def segment_sum(floating[:, ::1] values, const cnp.int64_t[::1] order,
                const cnp.int64_t[::1] indptr):
    cdef Py_ssize_t nseg = indptr.shape[0] - 1
    cdef Py_ssize_t width = values.shape[1]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((nseg, width), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t s, p, m, e
    with nogil:
        for s in range(nseg):
            for p in range(indptr[s], indptr[s + 1]):
                e = order[p]
                for m in range(width):
                    out[s, m] += values[e, m]
    return out_arr


def segment_max(floating[:, ::1] values, const cnp.int64_t[::1] order,
                const cnp.int64_t[::1] indptr):
    cdef Py_ssize_t nseg = indptr.shape[0] - 1
    cdef Py_ssize_t width = values.shape[1]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((nseg, width), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t s, p, m, e
    cdef floating v, o
    with nogil:
        for s in range(nseg):
            if indptr[s] == indptr[s + 1]:
                continue
            for m in range(width):
                out[s, m] = -INFINITY
            for p in range(indptr[s], indptr[s + 1]):
                e = order[p]
                for m in range(width):
                    # select form vectorizes; NaN propagates like np.maximum
                    v = values[e, m]
                    o = out[s, m]
                    out[s, m] = v if (v > o or v != v) else o
    return out_arr


cdef inline double _sqdist(const double[:, ::1] x, Py_ssize_t i, Py_ssize_t j) noexcept nogil:
    cdef double acc = 0.0, diff
    cdef Py_ssize_t t
    for t in range(x.shape[1]):
        diff = x[i, t] - x[j, t]
        acc += diff * diff
    return acc


def knn(const double[:, ::1] coords, Py_ssize_t k):
    cdef Py_ssize_t n = coords.shape[0]
    out_arr = np.empty((n, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    best_d_arr = np.empty(k, dtype=np.float64)
    cdef double[::1] best_d = best_d_arr
    cdef Py_ssize_t i, j, slot, filled
    cdef double d
    with nogil:
        for i in range(n):
            filled = 0
            for j in range(n):
                if j == i:
                    continue
                d = _sqdist(coords, i, j)
                # (distance, id) lexicographic; j ascends so equal distances keep earlier ids
                if filled == k and d >= best_d[k - 1]:
                    continue
                slot = filled if filled < k else k - 1
                while slot > 0 and best_d[slot - 1] > d:
                    best_d[slot] = best_d[slot - 1]
                    out[i, slot] = out[i, slot - 1]
                    slot -= 1
                best_d[slot] = d
                out[i, slot] = j
                if filled < k:
                    filled += 1
    return out_arr


def radius_pairs(const double[:, ::1] coords, double radius):
    cdef Py_ssize_t n = coords.shape[0]
    cdef double r2 = radius * radius
    cdef Py_ssize_t i, j
    src = []
    dst = []
    for i in range(n):
        for j in range(n):
            if i != j and _sqdist(coords, i, j) <= r2:
                src.append(j)
                dst.append(i)
    return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)
