# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the distance and top-k kernels."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt

cnp.import_array()

NAME = "cython"


def dirac_sq(const double[:, ::1] queries, const double[:, ::1] means, const double[:, ::1] variances):
    cdef Py_ssize_t n = queries.shape[0], c = means.shape[0], d = queries.shape[1]
    cdef Py_ssize_t i, j, t
    cdef double acc, diff
    out = np.empty((n, c), dtype=np.float64)
    traces_arr = np.empty(c, dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[::1] traces = traces_arr
    with nogil:
        for j in range(c):
            acc = 0.0
            for t in range(d):
                acc = acc + variances[j, t]
            traces[j] = acc
        for i in range(n):
            for j in range(c):
                acc = 0.0
                for t in range(d):
                    diff = queries[i, t] - means[j, t]
                    acc = acc + diff * diff
                o[i, j] = acc + traces[j]
    return out


def bures_sq_rows(const double[:, ::1] m1, const double[:, ::1] v1,
                  const double[:, ::1] m2, const double[:, ::1] v2):
    cdef Py_ssize_t n = m1.shape[0], d = m1.shape[1]
    cdef Py_ssize_t i, t
    cdef double acc, cov, diff, term
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            acc = 0.0
            for t in range(d):
                diff = m1[i, t] - m2[i, t]
                acc = acc + diff * diff
            cov = 0.0
            for t in range(d):
                if v1[i, t] == 0.0 or v2[i, t] == 0.0:
                    term = v1[i, t] + v2[i, t]
                else:
                    term = (v1[i, t] - v2[i, t]) / (sqrt(v1[i, t]) + sqrt(v2[i, t]))
                    term = term * term
                cov = cov + term
            o[i] = acc + cov
    return out


cdef inline void _select(const double* vals, Py_ssize_t d, Py_ssize_t k,
                         double* bv, Py_ssize_t* bi) noexcept nogil:
    # bv/bi kept sorted descending; strict '>' keeps the earlier index on ties
    cdef Py_ssize_t filled = 0, t, p
    cdef double v
    for t in range(d):
        v = vals[t]
        if filled == k and not (v > bv[k - 1]):
            continue
        p = filled if filled < k else k - 1
        while p > 0 and v > bv[p - 1]:
            bv[p] = bv[p - 1]
            bi[p] = bi[p - 1]
            p -= 1
        bv[p] = v
        bi[p] = t
        if filled < k:
            filled += 1


def topk_indices(const double[:, ::1] values, Py_ssize_t k):
    cdef Py_ssize_t r = values.shape[0], d = values.shape[1], i
    out = np.empty((r, k), dtype=np.intp)
    cdef Py_ssize_t[:, ::1] o = out
    bv_arr = np.empty(k, dtype=np.float64)
    cdef double[::1] bv = bv_arr
    with nogil:
        for i in range(r):
            _select(&values[i, 0], d, k, &bv[0], &o[i, 0])
    return out


def topk_union(const double[:, ::1] queries, const double[:, ::1] means, Py_ssize_t k):
    cdef Py_ssize_t n = queries.shape[0], c = means.shape[0], d = queries.shape[1]
    cdef Py_ssize_t i, j, t
    union = np.zeros((n, d), dtype=np.uint8)
    if n == 0:
        return union
    cdef cnp.uint8_t[:, ::1] mask = union
    gaps_arr = np.empty(d, dtype=np.float64)
    bv_arr = np.empty(k, dtype=np.float64)
    bi_arr = np.empty(k, dtype=np.intp)
    cdef double[::1] gaps = gaps_arr
    cdef double[::1] bv = bv_arr
    cdef Py_ssize_t[::1] bi = bi_arr
    with nogil:
        for i in range(n):
            for j in range(c):
                for t in range(d):
                    gaps[t] = fabs(queries[i, t] - means[j, t])
                _select(&gaps[0], d, k, &bv[0], &bi[0])
                for t in range(k):
                    mask[i, bi[t]] = 1
    return union
