# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


def normalized_aggregate(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
                         const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, e, j, c
    cdef double di, w
    out_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            di = <double>(indptr[i + 1] - indptr[i]) + 1.0
            w = 1.0 / sqrt(di * di)
            for c in range(d):
                out[i, c] = x[i, c] * w
            for e in range(indptr[i], indptr[i + 1]):
                j = indices[e]
                w = 1.0 / sqrt(di * (<double>(indptr[j + 1] - indptr[j]) + 1.0))
                for c in range(d):
                    out[i, c] = out[i, c] + x[j, c] * w
    return out_arr


def neighbor_sum(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
                 const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, e, j, c
    out_arr = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            for e in range(indptr[i], indptr[i + 1]):
                j = indices[e]
                for c in range(d):
                    out[i, c] = out[i, c] + x[j, c]
    return out_arr


def knn_query(const double[:, ::1] queries, const double[:, ::1] base, Py_ssize_t k,
              bint exclude_self):
    cdef Py_ssize_t m = queries.shape[0], n = base.shape[0], d = base.shape[1]
    cdef Py_ssize_t i, j, c, pos
    cdef double s, t
    out_arr = np.empty((m, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    best_d_arr = np.empty(k, dtype=np.float64)
    cdef double[::1] best_d = best_d_arr
    with nogil:
        for i in range(m):
            for pos in range(k):
                best_d[pos] = INFINITY
                out[i, pos] = -1
            for j in range(n):
                if exclude_self and j == i:
                    continue
                s = 0.0
                for c in range(d):
                    t = base[j, c] - queries[i, c]
                    s = s + t * t
                # strict comparison: an earlier index keeps its slot on ties
                if out[i, k - 1] >= 0 and s >= best_d[k - 1]:
                    continue
                pos = k - 1
                while pos > 0 and (out[i, pos - 1] < 0 or s < best_d[pos - 1]):
                    best_d[pos] = best_d[pos - 1]
                    out[i, pos] = out[i, pos - 1]
                    pos -= 1
                best_d[pos] = s
                out[i, pos] = j
    return out_arr
