"""Pure numpy versions of the hot kernels.

These mirror ``_kernels.pyx`` line for line and are used whenever the
compiled extension is missing or ``WELFARE_MTE_PURE_PYTHON`` is set.
"""
import numpy as np
from scipy.special import log_ndtr

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def _quad_utility(th1, th2, th3, h, y):
    return th1 * h - 0.5 * th2 * h * h + y - 0.5 * th3 * y * y


def _segment(th1, th2, th3, wt, yv, cap):
    # utility is concave in hours on a linear segment, so the clipped
    # first-order condition is the maximum; the endpoints are compared anyway
    denom = th2 + th3 * wt * wt
    h = (th1 + wt * (1.0 - th3 * yv)) / denom
    h = np.minimum(np.maximum(h, 0.0), cap)
    u = _quad_utility(th1, th2, th3, h, wt * h + yv)
    u0 = _quad_utility(th1, th2, th3, 0.0, yv)
    uc = _quad_utility(th1, th2, th3, cap, wt * cap + yv)
    take0 = u0 > u
    h = np.where(take0, 0.0, h)
    u = np.where(take0, u0, u)
    takec = uc > u
    h = np.where(takec, cap, h)
    u = np.where(takec, uc, u)
    return h, u


def solve_regimes(theta1, theta2, theta3, w, n, g, t, r, hcap):
    """Optimal hours and indirect utility off and on the welfare segment.

    All array arguments are broadcast to a common 1-d shape.

    Returns
    -------
    h_off, v_off, h_on, v_on : ndarray
    eligible : ndarray of bool
        ``g - r*n >= 0``. Ineligible agents get the off-welfare values in
        the on-welfare slots.
    """
    th1, th2, th3, w, n, g, t, r = np.broadcast_arrays(
        *(np.asarray(a, dtype=np.float64) for a in (theta1, theta2, theta3, w, n, g, t, r))
    )
    th1, th2, th3, w, n, g, t, r = (np.ravel(a) for a in (th1, th2, th3, w, n, g, t, r))
    hcap = float(hcap)

    h_off, v_off = _segment(th1, th2, th3, w, n, hcap)

    room = g - r * n
    eligible = room >= 0.0
    tw = t * w
    with np.errstate(divide="ignore", invalid="ignore"):
        breakeven = np.where(tw > 0.0, room / tw, np.inf)
    cap_on = np.minimum(hcap, np.maximum(breakeven, 0.0))
    h_on, v_on = _segment(th1, th2, th3, w * (1.0 - t), g + (1.0 - r) * n, cap_on)
    h_on = np.where(eligible, h_on, h_off)
    v_on = np.where(eligible, v_on, v_off)
    return h_off, v_off, h_on, v_on, eligible


def probit_terms(xb, y):
    """Log-likelihood plus per-row score and Hessian weights of a probit.

    With ``q = 2y - 1`` and ``s = q * xb`` the gradient is ``X' (q*lam)`` and
    the Hessian is ``-X' diag(lam*(lam + s)) X`` where
    ``lam = phi(s) / Phi(s)``.
    """
    xb = np.asarray(xb, dtype=np.float64)
    q = 2.0 * np.asarray(y, dtype=np.float64) - 1.0
    s = q * xb
    log_cdf = log_ndtr(s)
    lam = np.exp(-0.5 * s * s - _LOG_SQRT_2PI - log_cdf)
    return float(log_cdf.sum()), q * lam, lam * (lam + s)
