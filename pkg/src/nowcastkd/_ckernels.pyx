# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for contingency counting and the weighted squared error.

Mirrors ``_pykernels`` exactly; see that module for the reference semantics.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def contingency_by_lead(const double[:, :, ::1] pred, const double[:, :, ::1] gt,
                        double threshold, Py_ssize_t pool):
    cdef Py_ssize_t T = pred.shape[0], H = pred.shape[1], W = pred.shape[2]
    cdef Py_ssize_t t, ti, tj, i, j, i0, j0
    cdef int p_ev, g_ev
    cdef cnp.int64_t c[4]
    out_arr = np.zeros((T, 4), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    for t in range(T):
        c[0] = c[1] = c[2] = c[3] = 0
        if pool == 1:
            for i in range(H):
                for j in range(W):
                    p_ev = pred[t, i, j] >= threshold
                    g_ev = gt[t, i, j] >= threshold
                    # slot order: hit, miss, false alarm, correct negative
                    c[2 * (1 - g_ev) + (1 - p_ev)] += 1
        else:
            for ti in range(H // pool):
                i0 = ti * pool
                for tj in range(W // pool):
                    j0 = tj * pool
                    p_ev = 0
                    g_ev = 0
                    for i in range(i0, i0 + pool):
                        for j in range(j0, j0 + pool):
                            p_ev |= pred[t, i, j] >= threshold
                            g_ev |= gt[t, i, j] >= threshold
                        if p_ev and g_ev:
                            break
                    c[2 * (1 - g_ev) + (1 - p_ev)] += 1
        for i in range(4):
            out[t, i] = c[i]
    return out_arr


def weighted_sq_error(const double[::1] pred, const double[::1] target,
                      const double[::1] target_raw, double tau, double w_max,
                      double scale):
    cdef Py_ssize_t n = pred.shape[0], k
    cdef double total = 0.0, d, w
    grad_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] grad = grad_arr
    for k in range(n):
        d = pred[k] - target[k]
        w = w_max if target_raw[k] > tau else 1.0
        total += w * d * d
        grad[k] = 2.0 * w * d * scale
    return total * scale, grad_arr
