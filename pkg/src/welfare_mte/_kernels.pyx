# cython: language_level=3
"""Compiled versions of the hot kernels; see ``_kernels_python`` for the
reference numpy implementation and the exact contracts."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY
from scipy.special.cython_special cimport log_ndtr

cnp.import_array()

cdef double LOG_SQRT_2PI = 0.91893853320467274178


cdef inline double _quad_utility(double th1, double th2, double th3,
                                 double h, double y) noexcept nogil:
    return th1 * h - 0.5 * th2 * h * h + y - 0.5 * th3 * y * y


cdef inline void _segment(double th1, double th2, double th3, double wt,
                          double yv, double cap, double* h_out,
                          double* u_out) noexcept nogil:
    cdef double denom = th2 + th3 * wt * wt
    cdef double h = (th1 + wt * (1.0 - th3 * yv)) / denom
    cdef double u, u0, uc
    if h < 0.0:
        h = 0.0
    if h > cap:
        h = cap
    u = _quad_utility(th1, th2, th3, h, wt * h + yv)
    u0 = _quad_utility(th1, th2, th3, 0.0, yv)
    uc = _quad_utility(th1, th2, th3, cap, wt * cap + yv)
    if u0 > u:
        h = 0.0
        u = u0
    if uc > u:
        h = cap
        u = uc
    h_out[0] = h
    u_out[0] = u


def solve_regimes(theta1, theta2, theta3, w, n, g, t, r, hcap):
    arrs = np.broadcast_arrays(
        *(np.asarray(a, dtype=np.float64) for a in (theta1, theta2, theta3, w, n, g, t, r))
    )
    cdef const double[::1] th1 = np.ascontiguousarray(np.ravel(arrs[0]))
    cdef const double[::1] th2 = np.ascontiguousarray(np.ravel(arrs[1]))
    cdef const double[::1] th3 = np.ascontiguousarray(np.ravel(arrs[2]))
    cdef const double[::1] wv = np.ascontiguousarray(np.ravel(arrs[3]))
    cdef const double[::1] nv = np.ascontiguousarray(np.ravel(arrs[4]))
    cdef const double[::1] gv = np.ascontiguousarray(np.ravel(arrs[5]))
    cdef const double[::1] tv = np.ascontiguousarray(np.ravel(arrs[6]))
    cdef const double[::1] rv = np.ascontiguousarray(np.ravel(arrs[7]))
    cdef Py_ssize_t m = th1.shape[0]
    cdef double cap = float(hcap)

    h_off_a = np.empty(m)
    v_off_a = np.empty(m)
    h_on_a = np.empty(m)
    v_on_a = np.empty(m)
    elig_a = np.empty(m, dtype=np.bool_)
    cdef double[::1] h_off = h_off_a
    cdef double[::1] v_off = v_off_a
    cdef double[::1] h_on = h_on_a
    cdef double[::1] v_on = v_on_a
    cdef cnp.npy_bool[::1] elig = elig_a

    cdef Py_ssize_t i
    cdef double room, tw, cap_on, breakeven
    with nogil:
        for i in range(m):
            _segment(th1[i], th2[i], th3[i], wv[i], nv[i], cap, &h_off[i], &v_off[i])
            room = gv[i] - rv[i] * nv[i]
            if room >= 0.0:
                elig[i] = 1
                tw = tv[i] * wv[i]
                if tw > 0.0:
                    breakeven = room / tw
                else:
                    breakeven = INFINITY
                if breakeven < 0.0:
                    breakeven = 0.0
                cap_on = cap if cap < breakeven else breakeven
                _segment(th1[i], th2[i], th3[i], wv[i] * (1.0 - tv[i]),
                         gv[i] + (1.0 - rv[i]) * nv[i], cap_on, &h_on[i], &v_on[i])
            else:
                elig[i] = 0
                h_on[i] = h_off[i]
                v_on[i] = v_off[i]
    return h_off_a, v_off_a, h_on_a, v_on_a, elig_a


def probit_terms(xb, y):
    cdef const double[::1] xv = np.ascontiguousarray(xb, dtype=np.float64)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t m = xv.shape[0]
    score_a = np.empty(m)
    hess_a = np.empty(m)
    cdef double[::1] score = score_a
    cdef double[::1] hess = hess_a
    cdef Py_ssize_t i
    cdef double q, s, lc, lam, total = 0.0
    with nogil:
        for i in range(m):
            q = 2.0 * yv[i] - 1.0
            s = q * xv[i]
            lc = log_ndtr(s)
            total += lc
            lam = exp(-0.5 * s * s - LOG_SQRT_2PI - lc)
            score[i] = q * lam
            hess[i] = lam * (lam + s)
    return total, score_a, hess_a
