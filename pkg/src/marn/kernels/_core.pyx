# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled sampling kernels: gather-and-lerp forward, scatter-add adjoint."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def sample_rows(double[:, ::1] features,
                cnp.int64_t[::1] idx_lo, cnp.int64_t[::1] idx_hi,
                double[::1] w_lo, double[::1] w_hi):
    cdef Py_ssize_t n = idx_lo.shape[0]
    cdef Py_ssize_t d = features.shape[1]
    out_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t p, k, lo, hi
    cdef double a, b
    with nogil:
        for p in range(n):
            lo = idx_lo[p]
            hi = idx_hi[p]
            a = w_lo[p]
            b = w_hi[p]
            for k in range(d):
                out[p, k] = a * features[lo, k] + b * features[hi, k]
    return out_arr


def sample_rows_grad(double[:, ::1] grad_out,
                     cnp.int64_t[::1] idx_lo, cnp.int64_t[::1] idx_hi,
                     double[::1] w_lo, double[::1] w_hi,
                     Py_ssize_t n_rows):
    cdef Py_ssize_t n = idx_lo.shape[0]
    cdef Py_ssize_t d = grad_out.shape[1]
    grad_arr = np.zeros((n_rows, d), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    cdef Py_ssize_t p, k, lo, hi
    cdef double a, b
    with nogil:
        for p in range(n):
            lo = idx_lo[p]
            hi = idx_hi[p]
            a = w_lo[p]
            b = w_hi[p]
            for k in range(d):
                grad[lo, k] += a * grad_out[p, k]
                grad[hi, k] += b * grad_out[p, k]
    return grad_arr
