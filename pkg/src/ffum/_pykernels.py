"""Pure-numpy versions of the row-wise f-divergence kernels.

Kind codes: 0 = KL, 1 = chi-squared, 2 = Jensen-Shannon.
"""

import numpy as np

KL, CHI2, JS = 0, 1, 2
LN2 = float(np.log(2.0))


def fdiv_rows(P, Q, kind):
    """Row-wise ``sum_i q_i f(p_i / q_i)`` with partials w.r.t. P and Q.

    ``Q`` must be strictly positive. Zero entries of ``P`` use the right limit
    of the generator; the P-partial at such entries is reported as 0.
    """
    P = np.ascontiguousarray(P, dtype=np.float64)
    Q = np.ascontiguousarray(Q, dtype=np.float64)
    t = P / Q
    pos = t > 0.0
    safe_t = np.where(pos, t, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind == KL:
            lt = np.log(safe_t)
            f = np.where(pos, t * lt, 0.0)
            dp = np.where(pos, lt + 1.0, 0.0)
            dq = -t
        elif kind == CHI2:
            f = (1.0 - t) * (1.0 - t)
            dp = np.where(pos, 2.0 * (t - 1.0), 0.0)
            dq = 1.0 - t * t
        elif kind == JS:
            r = np.log(2.0 * safe_t / (1.0 + safe_t))
            tail = np.log(2.0 / (1.0 + t))
            f = np.where(pos, t * r + tail, LN2)
            dp = np.where(pos, r, 0.0)
            dq = tail
        else:
            raise ValueError(f"unknown divergence code {kind}")
    loss = np.sum(Q * f, axis=1)
    return loss, dp, dq
