# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: im2col/col2im gathers and one-sided Jacobi rotations."""

from libc.math cimport sqrt, fabs

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, int kh, int kw, int sh, int sw, int oh, int ow):
    """Gather padded NCHW input into a (C*kh*kw, N*oh*ow) column matrix."""
    cdef Py_ssize_t n_batch = xp.shape[0]
    cdef Py_ssize_t chans = xp.shape[1]
    cdef Py_ssize_t n, c, i, j, y, x, row, col
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((chans * kh * kw, n_batch * oh * ow), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    for c in range(chans):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                for n in range(n_batch):
                    col = n * oh * ow
                    for y in range(oh):
                        for x in range(ow):
                            out[row, col] = xp[n, c, y * sh + i, x * sw + j]
                            col += 1
    return out_arr


def col2im(real[:, ::1] cols, int n_batch, int chans, int hp, int wp,
           int kh, int kw, int sh, int sw, int oh, int ow):
    """Scatter-add a column matrix back into a zeroed padded NCHW tensor."""
    cdef Py_ssize_t n, c, i, j, y, x, row, col
    dtype = np.float32 if real is float else np.float64
    xp_arr = np.zeros((n_batch, chans, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] xp = xp_arr
    for c in range(chans):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                for n in range(n_batch):
                    col = n * oh * ow
                    for y in range(oh):
                        for x in range(ow):
                            xp[n, c, y * sh + i, x * sw + j] += cols[row, col]
                            col += 1
    return xp_arr


def jacobi_rotate(double[:, ::1] at, double[:, ::1] vt, double tol, int max_sweeps):
    """Cyclic one-sided Jacobi on the rows of ``at`` (the columns of A).

    ``at`` is (n, m) and is orthogonalised in place; ``vt`` (n, n) accumulates
    the same rotations. Returns the number of sweeps performed.
    """
    cdef Py_ssize_t n = at.shape[0]
    cdef Py_ssize_t m = at.shape[1]
    cdef Py_ssize_t p, q, k
    cdef double alpha, beta, gamma, zeta, t, cs, sn, a, b
    cdef int sweep, rotated
    for sweep in range(max_sweeps):
        rotated = 0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for k in range(m):
                    alpha += at[p, k] * at[p, k]
                    beta += at[q, k] * at[q, k]
                    gamma += at[p, k] * at[q, k]
                if gamma == 0.0 or fabs(gamma) <= tol * sqrt(alpha * beta):
                    continue
                rotated = 1
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0:
                    t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                cs = 1.0 / sqrt(1.0 + t * t)
                sn = cs * t
                for k in range(m):
                    a = at[p, k]
                    b = at[q, k]
                    at[p, k] = cs * a - sn * b
                    at[q, k] = sn * a + cs * b
                for k in range(n):
                    a = vt[p, k]
                    b = vt[q, k]
                    vt[p, k] = cs * a - sn * b
                    vt[q, k] = sn * a + cs * b
        if not rotated:
            return sweep + 1
    return max_sweeps
