"""Pure-Python kernels used when the compiled extension is unavailable.

Same signatures and the same in-place contracts as ``_kernels.pyx``.
"""
import math

import numpy as np


def column_dots(X, r, out):
    for j in range(X.shape[1]):
        out[j] = X[:, j] @ r


def lasso_cd(X, r, w, col_sq, alpha, tol, max_sweeps, objective):
    n, v = X.shape
    inv_n = 1.0 / n
    objective[0] = 0.5 * (r @ r) * inv_n + alpha * np.abs(w).sum()
    sweep = 0
    max_delta = 0.0
    while sweep < max_sweeps:
        max_delta = 0.0
        for j in range(v):
            g = col_sq[j]
            if g == 0.0:
                continue
            xj = X[:, j]
            wj = w[j]
            rho = (xj @ r) * inv_n + g * wj
            if rho > alpha:
                new = (rho - alpha) / g
            elif rho < -alpha:
                new = (rho + alpha) / g
            else:
                new = 0.0
            delta = new - wj
            if delta != 0.0:
                r -= delta * xj
                w[j] = new
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        sweep += 1
        objective[sweep] = 0.5 * (r @ r) * inv_n + alpha * np.abs(w).sum()
        if max_delta < tol:
            break
    return sweep, max_delta


def perplexity_search(sqdist, perplexity, tol, max_steps, P, entropy_gap):
    m = sqdist.shape[0]
    target = math.log(perplexity)
    for i in range(m):
        d = np.delete(sqdist[i], i)
        d = d - d.min()
        beta = 1.0
        lo = hi = None
        diff = 0.0
        p = None
        for _ in range(max_steps):
            p = np.exp(-d * beta)
            s = p.sum()
            p /= s
            h = math.log(s) + beta * (d @ p)
            diff = h - target
            if abs(diff) <= tol:
                break
            if diff > 0.0:
                lo = beta
                beta = 0.5 * (beta + hi) if hi is not None else beta * 2.0
            else:
                hi = beta
                beta = 0.5 * (beta + lo) if lo is not None else beta * 0.5
        P[i, :i] = p[:i]
        P[i, i] = 0.0
        P[i, i + 1:] = p[i:]
        entropy_gap[i] = abs(diff)
