# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row-wise f-divergence kernel; same contract as ``_pykernels``."""

import numpy as np
from libc.math cimport log

DEF KL = 0
DEF CHI2 = 1
DEF JS = 2


def fdiv_rows(P, Q, int kind):
    if kind < 0 or kind > 2:
        raise ValueError(f"unknown divergence code {kind}")
    cdef double[:, ::1] p = np.ascontiguousarray(P, dtype=np.float64)
    cdef double[:, ::1] q = np.ascontiguousarray(Q, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], k = p.shape[1]
    if q.shape[0] != n or q.shape[1] != k:
        raise ValueError("P and Q shapes differ")
    loss_arr = np.zeros(n, dtype=np.float64)
    dp_arr = np.empty((n, k), dtype=np.float64)
    dq_arr = np.empty((n, k), dtype=np.float64)
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] dp = dp_arr
    cdef double[:, ::1] dq = dq_arr
    cdef Py_ssize_t i, j
    cdef double t, f, lt, r, tail, acc
    cdef double ln2 = log(2.0)
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(k):
                t = p[i, j] / q[i, j]
                if kind == KL:
                    if t > 0.0:
                        lt = log(t)
                        f = t * lt
                        dp[i, j] = lt + 1.0
                    else:
                        f = 0.0
                        dp[i, j] = 0.0
                    dq[i, j] = -t
                elif kind == CHI2:
                    f = (1.0 - t) * (1.0 - t)
                    dp[i, j] = 2.0 * (t - 1.0) if t > 0.0 else 0.0
                    dq[i, j] = 1.0 - t * t
                else:
                    tail = log(2.0 / (1.0 + t))
                    if t > 0.0:
                        r = log(2.0 * t / (1.0 + t))
                        f = t * r + tail
                        dp[i, j] = r
                    else:
                        f = ln2
                        dp[i, j] = 0.0
                    dq[i, j] = tail
                acc += q[i, j] * f
            loss[i] = acc
    return loss_arr, dp_arr, dq_arr
