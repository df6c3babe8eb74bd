# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: scatter-add over edge segments and the log-domain count table.

Both functions have pure-numpy twins in `fallback.py`; the package selects one
implementation at import time.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, exp, log1p

cnp.import_array()


cdef inline double _lse(double a, double b) nogil:
    # log(exp(a) + exp(b)) without overflow; tolerates -inf operands
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a >= b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


def segment_sum(values, segments, Py_ssize_t num_segments):
    """Sum rows of `values` into `out[segments[i]]`; out has num_segments rows."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    segments = np.ascontiguousarray(segments, dtype=np.int64)
    cdef double[:, ::1] v = values
    cdef cnp.int64_t[::1] s = segments
    cdef Py_ssize_t n_rows = v.shape[0]
    cdef Py_ssize_t dim = v.shape[1]
    if s.shape[0] != n_rows:
        raise ValueError("segments length must match values rows")
    out_arr = np.zeros((num_segments, dim), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef cnp.int64_t k
    for i in range(n_rows):
        k = s[i]
        if k < 0 or k >= num_segments:
            raise IndexError(f"segment id {k} out of range [0, {num_segments})")
        for j in range(dim):
            out[k, j] += v[i, j]
    return out_arr


def log_count_table(logq, log1mq, Py_ssize_t m):
    """Forward table T[i, j] = log P(sum of first i Bernoullis equals j), j <= m.

    Unreachable counts hold -inf. Shape (n+1, m+1), row 0 is the empty prefix.
    """
    logq = np.ascontiguousarray(logq, dtype=np.float64)
    log1mq = np.ascontiguousarray(log1mq, dtype=np.float64)
    cdef double[::1] lq = logq
    cdef double[::1] l1 = log1mq
    cdef Py_ssize_t n = lq.shape[0]
    if l1.shape[0] != n:
        raise ValueError("logq and log1mq must have equal length")
    if m < 0:
        raise ValueError("m must be >= 0")
    table_arr = np.full((n + 1, m + 1), -np.inf, dtype=np.float64)
    cdef double[:, ::1] t = table_arr
    cdef Py_ssize_t i, j
    cdef double stay, take
    t[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(m + 1):
            stay = t[i - 1, j] + l1[i - 1]
            take = t[i - 1, j - 1] + lq[i - 1] if j > 0 else -INFINITY
            t[i, j] = _lse(stay, take)
    return table_arr
