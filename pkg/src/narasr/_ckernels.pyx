# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled CTC kernels. Same signatures and semantics as ``_pykernels``."""

import numpy as np
from libc.math cimport exp, log1p, INFINITY

cdef double NEG_INF = -INFINITY
cdef double LN2 = 0.6931471805599453


cdef inline double logadd(double a, double b) nogil:
    cdef double d
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a == b:
        return a + LN2
    d = a - b
    if d > 0:
        return a + log1p(exp(-d))
    return b + log1p(exp(d))


def ctc_forward_backward(log_probs, target, Py_ssize_t blank):
    cdef double[:, ::1] y = np.ascontiguousarray(log_probs, dtype=np.float64)
    cdef long long[::1] tgt = np.ascontiguousarray(target, dtype=np.int64)
    cdef Py_ssize_t T = y.shape[0], V = y.shape[1]
    cdef Py_ssize_t L = tgt.shape[0], S = 2 * L + 1
    cdef Py_ssize_t t, s
    ext_arr = np.full(S, blank, dtype=np.int64)
    cdef long long[::1] ext = ext_arr
    skip_arr = np.zeros(S, dtype=np.uint8)
    cdef unsigned char[::1] skip = skip_arr
    for s in range(L):
        ext[2 * s + 1] = tgt[s]
        if s > 0 and tgt[s] != tgt[s - 1]:
            skip[2 * s + 1] = 1

    alpha_arr = np.full((T, S), NEG_INF)
    beta_arr = np.full((T, S), NEG_INF)
    grad_arr = np.zeros((T, V))
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] beta = beta_arr
    cdef double[:, ::1] grad = grad_arr
    cdef double acc, loglik

    with nogil:
        alpha[0, 0] = y[0, ext[0]]
        if S > 1:
            alpha[0, 1] = y[0, ext[1]]
        for t in range(1, T):
            for s in range(S):
                acc = alpha[t - 1, s]
                if s >= 1:
                    acc = logadd(acc, alpha[t - 1, s - 1])
                if s >= 2 and skip[s]:
                    acc = logadd(acc, alpha[t - 1, s - 2])
                if acc != NEG_INF:
                    alpha[t, s] = acc + y[t, ext[s]]

        beta[T - 1, S - 1] = y[T - 1, ext[S - 1]]
        if S > 1:
            beta[T - 1, S - 2] = y[T - 1, ext[S - 2]]
        for t in range(T - 2, -1, -1):
            for s in range(S):
                acc = beta[t + 1, s]
                if s + 1 < S:
                    acc = logadd(acc, beta[t + 1, s + 1])
                if s + 2 < S and skip[s + 2]:
                    acc = logadd(acc, beta[t + 1, s + 2])
                if acc != NEG_INF:
                    beta[t, s] = acc + y[t, ext[s]]

        if S > 1:
            loglik = logadd(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
        else:
            loglik = alpha[T - 1, 0]
        for t in range(T):
            for s in range(S):
                acc = alpha[t, s] + beta[t, s]
                if acc != NEG_INF:
                    grad[t, ext[s]] -= exp(acc - y[t, ext[s]] - loglik)
    return float(-loglik), grad_arr


def prefix_extend(log_probs, r_n, r_b, Py_ssize_t last, cands, Py_ssize_t blank):
    cdef double[:, ::1] y = np.ascontiguousarray(log_probs, dtype=np.float64)
    cdef double[::1] gn = np.ascontiguousarray(r_n, dtype=np.float64)
    cdef double[::1] gb = np.ascontiguousarray(r_b, dtype=np.float64)
    cdef long long[::1] cs = np.ascontiguousarray(cands, dtype=np.int64)
    cdef Py_ssize_t T = y.shape[0], n = cs.shape[0]
    cdef Py_ssize_t i, t
    cdef long long c
    cdef double phi, psi, prev_n, prev_b

    psi_arr = np.empty(n)
    new_n_arr = np.full((n, T), NEG_INF)
    new_b_arr = np.full((n, T), NEG_INF)
    cdef double[::1] out_psi = psi_arr
    cdef double[:, ::1] nn = new_n_arr
    cdef double[:, ::1] nb = new_b_arr

    with nogil:
        for i in range(n):
            c = cs[i]
            if last < 0:
                nn[i, 0] = y[0, c]
            psi = nn[i, 0]
            for t in range(1, T):
                if c == last:
                    phi = gb[t - 1]
                else:
                    phi = logadd(gb[t - 1], gn[t - 1])
                prev_n = nn[i, t - 1]
                prev_b = nb[i, t - 1]
                nn[i, t] = logadd(prev_n, phi) + y[t, c]
                nb[i, t] = logadd(prev_n, prev_b) + y[t, blank]
                if phi != NEG_INF:
                    psi = logadd(psi, phi + y[t, c])
            out_psi[i] = psi
    return psi_arr, new_n_arr, new_b_arr
