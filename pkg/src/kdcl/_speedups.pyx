# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled covariance kernels.

BLAS/LAPACK (via SciPy's Cython bindings) on the raw C-ordered buffers: the
symmetric operands (P, R, GQG) are their own transposes, and the
non-symmetric ones (F, H) enter through the transpose trick, so no layout
copies are needed. The payoff over the pure backend is removing per-call
Python and argument-checking overhead, which dominates at these small
matrix sizes. Contracts match ``_kernels_pure`` exactly; symmetric inputs
are a documented precondition (every caller re-symmetrizes each step).
"""

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm, dgemv
from scipy.linalg.cython_lapack cimport dposv

from .errors import NumericalError

cnp.import_array()


def propagate_cov(double[:, ::1] p, double[:, ::1] f, double[:, ::1] gqg):
    """``F P F^T + GQG``, re-symmetrized. ``p`` and ``gqg`` symmetric."""
    cdef int n = p.shape[0]
    fp_arr = np.empty((n, n))
    out_arr = np.empty((n, n))
    cdef double[:, ::1] fp = fp_arr
    cdef double[:, ::1] out = out_arr
    cdef double one = 1.0, zero = 0.0
    cdef Py_ssize_t i, j
    cdef double v
    with nogil:
        for i in range(n):
            for j in range(n):
                out[i, j] = gqg[i, j]
        # Fortran view: fp^F = P @ F^T  (so the C view of fp is F @ P)
        dgemm("N", "N", &n, &n, &n, &one, &p[0, 0], &n, &f[0, 0], &n,
              &zero, &fp[0, 0], &n)
        # Fortran view: out^F += F @ (P F^T)  -> out = F P F^T + GQG
        dgemm("T", "N", &n, &n, &n, &one, &f[0, 0], &n, &fp[0, 0], &n,
              &one, &out[0, 0], &n)
        for i in range(n):
            for j in range(i, n):
                v = 0.5 * (out[i, j] + out[j, i])
                out[i, j] = v
                out[j, i] = v
    return out_arr


def update_cov(double[:, ::1] p, double[:, ::1] h, double[:, ::1] r,
               double[::1] innov):
    """Batched Kalman update; see the pure backend for the contract.
    ``p`` and ``r`` symmetric."""
    cdef int m = h.shape[0], n = p.shape[0]
    cdef int info = 0, inc = 1
    pht_arr = np.empty((m, n))   # C view: H P; Fortran view: P H^T (n x m)
    hp_f_arr = np.empty((n, m))  # Fortran view: H P (m x n), for the solve
    kt_f_arr = np.empty((n, m))  # Fortran view: K^T = S^-1 H P (m x n)
    s_arr = np.empty((m, m))
    pnew_arr = np.empty((n, n))
    dx_arr = np.empty(n)
    cdef double[:, ::1] pht = pht_arr
    cdef double[:, ::1] hp_f = hp_f_arr
    cdef double[:, ::1] kt_f = kt_f_arr
    cdef double[:, ::1] s = s_arr
    cdef double[:, ::1] pnew = pnew_arr
    cdef double[::1] dx = dx_arr
    cdef double[::1] iv = innov
    cdef double one = 1.0, zero = 0.0, neg = -1.0
    cdef Py_ssize_t i, j
    cdef double v
    with nogil:
        # Fortran view: pht^F = P @ H^T (n x m); C view is H P (m x n).
        dgemm("N", "N", &n, &m, &n, &one, &p[0, 0], &n, &h[0, 0], &n,
              &zero, &pht[0, 0], &n)
        for i in range(m):
            for j in range(m):
                s[i, j] = r[i, j]
        # Fortran view: s += H @ (P H^T) = H P H^T (symmetric).
        dgemm("T", "N", &m, &m, &n, &one, &h[0, 0], &n, &pht[0, 0], &n,
              &one, &s[0, 0], &m)
        # Transpose-copy H P into a Fortran (m x n) right-hand side.
        for i in range(m):
            for j in range(n):
                hp_f[j, i] = pht[i, j]
                kt_f[j, i] = pht[i, j]
        # kt^F <- S^-1 (H P): Cholesky solve; kt^F is K^T (m x n, ld m).
        dposv("L", &m, &n, &s[0, 0], &m, &kt_f[0, 0], &m, &info)
        if info == 0:
            # dx = (K^T)^T innov = K innov
            dgemv("T", &m, &n, &one, &kt_f[0, 0], &m, &iv[0], &inc,
                  &zero, &dx[0], &inc)
            for i in range(n):
                for j in range(n):
                    pnew[i, j] = p[i, j]
            # Fortran view: pnew^F -= K @ (H P); its C view then holds the
            # transpose, which the symmetrization below makes irrelevant.
            dgemm("T", "N", &n, &n, &m, &neg, &kt_f[0, 0], &m,
                  &hp_f[0, 0], &m, &one, &pnew[0, 0], &n)
            for i in range(n):
                for j in range(i, n):
                    v = 0.5 * (pnew[i, j] + pnew[j, i])
                    pnew[i, j] = v
                    pnew[j, i] = v
    if info != 0:
        raise NumericalError("innovation covariance not positive definite")
    return dx_arr, pnew_arr
