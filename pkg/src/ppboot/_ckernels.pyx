# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled resampling kernels.  Same contracts as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, INFINITY, M_LN2
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef inline double _logaddexp(double x, double y) noexcept nogil:
    cdef double tmp
    if x == y:
        return x + M_LN2
    tmp = x - y
    if tmp > 0:
        return x + log1p(exp(-tmp))
    elif tmp <= 0:
        return y + log1p(exp(tmp))
    return tmp


cdef void _select_kth(double* a, Py_ssize_t n, Py_ssize_t k) noexcept nogil:
    # Hoare quickselect: afterwards a[k] holds the k-th smallest value
    cdef Py_ssize_t lo = 0, hi = n - 1, i, j
    cdef double pivot, t
    while lo < hi:
        pivot = a[(lo + hi) >> 1]
        i = lo
        j = hi
        while i <= j:
            while a[i] < pivot:
                i += 1
            while a[j] > pivot:
                j -= 1
            if i <= j:
                t = a[i]; a[i] = a[j]; a[j] = t
                i += 1
                j -= 1
        if k <= j:
            hi = j
        elif k >= i:
            lo = i
        else:
            return


def pareto_select(U, lam, Py_ssize_t n):
    cdef const double[:, ::1] u = np.ascontiguousarray(U, dtype=np.float64)
    cdef const double[::1] lm = np.ascontiguousarray(lam, dtype=np.float64)
    cdef Py_ssize_t M = u.shape[0], N = u.shape[1], m, k, below, need
    out_arr = np.zeros((M, N), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] out = out_arr
    if n <= 0:
        return out_arr
    if n >= N:
        out_arr[:] = 1
        return out_arr
    cdef double* Q = <double*> malloc(N * sizeof(double))
    cdef double* buf = <double*> malloc(N * sizeof(double))
    cdef double kth
    with nogil:
        for m in range(M):
            for k in range(N):
                Q[k] = u[m, k] / (1.0 - u[m, k]) / lm[k]
                buf[k] = Q[k]
            _select_kth(buf, N, n - 1)
            kth = buf[n - 1]
            below = 0
            for k in range(N):
                if Q[k] < kth:
                    below += 1
            need = n - below
            for k in range(N):
                if Q[k] < kth:
                    out[m, k] = 1
                elif Q[k] == kth and need > 0:
                    out[m, k] = 1
                    need -= 1
    free(Q)
    free(buf)
    return out_arr


def cps_qtable(logw, Py_ssize_t n):
    cdef const double[::1] lw = np.ascontiguousarray(logw, dtype=np.float64)
    cdef Py_ssize_t K = lw.shape[0], k, j
    q_arr = np.zeros((K, n + 1))
    cdef double[:, ::1] q = q_arr
    cdef double* tail = <double*> malloc((n + 1) * sizeof(double))
    cdef double* new = <double*> malloc((n + 1) * sizeof(double))
    cdef double cand
    with nogil:
        tail[0] = 0.0
        for j in range(1, n + 1):
            tail[j] = -INFINITY
        for k in range(K - 1, -1, -1):
            new[0] = 0.0
            for j in range(1, n + 1):
                cand = lw[k] + tail[j - 1]
                new[j] = _logaddexp(cand, tail[j])
                if new[j] > -INFINITY:
                    q[k, j] = exp(cand - new[j])
            for j in range(n + 1):
                tail[j] = new[j]
    free(tail)
    free(new)
    return q_arr


def cps_first_order(q_in, Py_ssize_t n):
    cdef const double[:, ::1] q = np.ascontiguousarray(q_in, dtype=np.float64)
    cdef Py_ssize_t K = q.shape[0], k, j
    pi_arr = np.empty(K)
    cdef double[::1] pi = pi_arr
    cdef double* P = <double*> malloc((n + 1) * sizeof(double))
    cdef double* sel = <double*> malloc((n + 1) * sizeof(double))
    cdef double s
    with nogil:
        for j in range(n + 1):
            P[j] = 0.0
        P[n] = 1.0
        for k in range(K):
            s = 0.0
            for j in range(n + 1):
                sel[j] = P[j] * q[k, j]
                s += sel[j]
            pi[k] = s
            for j in range(n + 1):
                P[j] = P[j] - sel[j]
            for j in range(n):
                P[j] += sel[j + 1]
    free(P)
    free(sel)
    return pi_arr


def cps_sequential_select(U, q_in, forced_in, Py_ssize_t n_rest):
    cdef const double[:, ::1] u = np.ascontiguousarray(U, dtype=np.float64)
    cdef const double[:, ::1] q = np.ascontiguousarray(q_in, dtype=np.float64)
    cdef const cnp.uint8_t[::1] forced = np.ascontiguousarray(forced_in, dtype=np.uint8)
    cdef Py_ssize_t M = u.shape[0], N = u.shape[1], m, k, j
    out_arr = np.zeros((M, N), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] out = out_arr
    with nogil:
        for m in range(M):
            j = n_rest
            for k in range(N):
                if forced[k]:
                    out[m, k] = 1
                elif j > 0 and u[m, k] < q[k, j]:
                    out[m, k] = 1
                    j -= 1
    return out_arr


def hajek_stats(mask_in, y_in, w_in, probs_in):
    cdef const cnp.uint8_t[:, ::1] mask = np.ascontiguousarray(mask_in, dtype=np.uint8)
    cdef const double[::1] y = np.ascontiguousarray(y_in, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef const double[::1] probs = np.ascontiguousarray(probs_in, dtype=np.float64)
    cdef Py_ssize_t M = mask.shape[0], N = mask.shape[1], P = probs.shape[0]
    cdef Py_ssize_t m, k, c
    out_arr = np.empty((M, 3 + P))
    cdef double[:, ::1] out = out_arr
    cdef double sw, swy, cw
    with nogil:
        for m in range(M):
            sw = 0.0
            swy = 0.0
            for k in range(N):
                if mask[m, k]:
                    sw = sw + w[k]
                    swy = swy + w[k] * y[k]
            out[m, 0] = sw
            out[m, 1] = swy
            out[m, 2] = swy / sw
            for c in range(P):
                cw = 0.0
                for k in range(N):
                    if mask[m, k]:
                        cw = cw + w[k]
                        if cw / sw >= probs[c]:
                            out[m, 3 + c] = y[k]
                            break
    return out_arr
