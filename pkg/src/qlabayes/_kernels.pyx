# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the scalar polynomial-drift / cosine-diffusion family.

Both functions mirror ``qlabayes._fallback`` operation for operation.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, log, isfinite

cnp.import_array()


cdef inline double _horner(const double[::1] c, double x) noexcept nogil:
    cdef Py_ssize_t k = c.shape[0] - 1
    cdef double p = c[k]
    while k > 0:
        k -= 1
        p = p * x + c[k]
    return p


def euler_polytrig(double x0, double theta1, double theta2,
                   const double[::1] drift, double d0, double d1,
                   double delta, Py_ssize_t substeps, const double[::1] dw):
    """Euler-Maruyama on the fine grid, recording every ``substeps``-th state.

    Returns ``(states, bad)`` where ``bad`` is the first fine step producing a
    non-finite state, or -1.
    """
    cdef Py_ssize_t total = dw.shape[0]
    cdef Py_ssize_t n = total // substeps
    out_arr = np.empty(n + 1, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double x = x0
    cdef double a, b
    cdef Py_ssize_t i, j, step = 0
    out[0] = x
    with nogil:
        for i in range(n):
            for j in range(substeps):
                a = -theta2 * _horner(drift, x)
                b = theta1 * (d0 + d1 * cos(x))
                x = x + delta * a + b * dw[step]
                step += 1
                if not isfinite(x):
                    with gil:
                        return out_arr, step
            out[i + 1] = x
    return out_arr, -1


def polytrig_stats(const double[::1] x, const double[::1] drift, double d0, double d1):
    """Sufficient statistics of the quasi-likelihood for the scalar family.

    With p = poly(X_{i-1}), c = d0 + d1 cos X_{i-1} and dX = X_i - X_{i-1}:
    returns (sum dX^2/c^2, sum dX p/c^2, sum p^2/c^2, sum log c^2).
    """
    cdef Py_ssize_t n = x.shape[0] - 1
    cdef Py_ssize_t i
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, lc = 0.0
    cdef double xp, dx, p, c, c2
    with nogil:
        for i in range(n):
            xp = x[i]
            dx = x[i + 1] - xp
            p = _horner(drift, xp)
            c = d0 + d1 * cos(xp)
            c2 = c * c
            s0 += dx * dx / c2
            s1 += dx * p / c2
            s2 += p * p / c2
            lc += log(c2)
    return s0, s1, s2, lc
