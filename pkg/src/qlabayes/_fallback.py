"""Pure-Python versions of the compiled kernels in ``_kernels.pyx``."""

import math

import numpy as np


def _horner(c, x):
    p = c[-1]
    for k in range(len(c) - 2, -1, -1):
        p = p * x + c[k]
    return p


def euler_polytrig(x0, theta1, theta2, drift, d0, d1, delta, substeps, dw):
    drift = [float(v) for v in drift]
    dw = np.asarray(dw, dtype=np.float64).tolist()
    n = len(dw) // substeps
    out = [0.0] * (n + 1)
    x = float(x0)
    out[0] = x
    step = 0
    cos = math.cos
    isfinite = math.isfinite
    for i in range(n):
        for _ in range(substeps):
            a = -theta2 * _horner(drift, x)
            b = theta1 * (d0 + d1 * cos(x))
            x = x + delta * a + b * dw[step]
            step += 1
            if not isfinite(x):
                return np.asarray(out, dtype=np.float64), step
        out[i + 1] = x
    return np.asarray(out, dtype=np.float64), -1


def polytrig_stats(x, drift, d0, d1):
    x = np.asarray(x, dtype=np.float64)
    xp = x[:-1]
    dx = np.diff(x)
    p = np.full_like(xp, drift[-1])
    for c in drift[-2::-1]:
        p = p * xp + c
    c2 = (d0 + d1 * np.cos(xp)) ** 2
    return (
        float(np.sum(dx * dx / c2)),
        float(np.sum(dx * p / c2)),
        float(np.sum(p * p / c2)),
        float(np.sum(np.log(c2))),
    )
