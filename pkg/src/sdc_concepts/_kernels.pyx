# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Signatures mirror ``_pure`` exactly."""
from libc.math cimport exp, fabs, log


cdef inline double _soft(double x, double t) noexcept nogil:
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


cdef inline double _coldot(const double[::1, :] X, const double[::1] r, Py_ssize_t j) noexcept nogil:
    cdef Py_ssize_t i
    cdef double acc = 0.0
    for i in range(X.shape[0]):
        acc += X[i, j] * r[i]
    return acc


def column_dots(const double[::1, :] X, const double[::1] r, double[::1] out):
    """out[j] = X[:, j] . r, accumulated in row order."""
    cdef Py_ssize_t j
    with nogil:
        for j in range(X.shape[1]):
            out[j] = _coldot(X, r, j)


def lasso_cd(const double[::1, :] X, double[::1] r, double[::1] w,
             const double[::1] col_sq, double alpha, double tol,
             Py_ssize_t max_sweeps, double[::1] objective):
    """Cyclic coordinate descent for (1/2n)||r||^2 + alpha*||w||_1.

    ``r`` must hold y - X w on entry and is updated in place together with
    ``w``. ``objective[k]`` receives the objective after sweep k (index 0 is
    the starting point). Returns (sweeps, last max |delta w|).
    """
    cdef Py_ssize_t n = X.shape[0], v = X.shape[1]
    cdef Py_ssize_t i, j, sweep = 0
    cdef double inv_n = 1.0 / n
    cdef double g, rho, new, delta, max_delta = 0.0, ss, l1

    with nogil:
        ss = 0.0
        for i in range(n):
            ss += r[i] * r[i]
        l1 = 0.0
        for j in range(v):
            l1 += fabs(w[j])
        objective[0] = 0.5 * ss * inv_n + alpha * l1

        while sweep < max_sweeps:
            max_delta = 0.0
            for j in range(v):
                g = col_sq[j]
                if g == 0.0:
                    continue
                rho = _coldot(X, r, j) * inv_n + g * w[j]
                new = _soft(rho, alpha) / g
                delta = new - w[j]
                if delta != 0.0:
                    for i in range(n):
                        r[i] -= delta * X[i, j]
                    w[j] = new
                    if fabs(delta) > max_delta:
                        max_delta = fabs(delta)
            sweep += 1
            ss = 0.0
            for i in range(n):
                ss += r[i] * r[i]
            l1 = 0.0
            for j in range(v):
                l1 += fabs(w[j])
            objective[sweep] = 0.5 * ss * inv_n + alpha * l1
            if max_delta < tol:
                break
    return sweep, max_delta


def perplexity_search(const double[:, ::1] sqdist, double perplexity,
                      double tol, Py_ssize_t max_steps, double[:, ::1] P,
                      double[::1] entropy_gap):
    """Per-row bisection on the Gaussian precision to hit a target perplexity.

    Fills the conditional affinities ``P`` (zero diagonal, rows sum to one)
    and the final |H_i - log(perplexity)| per row.
    """
    cdef Py_ssize_t m = sqdist.shape[0]
    cdef Py_ssize_t i, j, step
    cdef double target = log(perplexity)
    cdef double beta, beta_lo, beta_hi, dmin, s, sd, h, diff
    cdef bint has_lo, has_hi

    with nogil:
        for i in range(m):
            dmin = -1.0
            for j in range(m):
                if j != i and (dmin < 0.0 or sqdist[i, j] < dmin):
                    dmin = sqdist[i, j]
            beta = 1.0
            has_lo = False
            has_hi = False
            beta_lo = 0.0
            beta_hi = 0.0
            diff = 0.0
            for step in range(max_steps):
                s = 0.0
                for j in range(m):
                    if j == i:
                        P[i, j] = 0.0
                    else:
                        P[i, j] = exp(-(sqdist[i, j] - dmin) * beta)
                        s += P[i, j]
                sd = 0.0
                for j in range(m):
                    P[i, j] /= s
                    sd += (sqdist[i, j] - dmin) * P[i, j]
                h = log(s) + beta * sd
                diff = h - target
                if fabs(diff) <= tol:
                    break
                if diff > 0.0:
                    has_lo = True
                    beta_lo = beta
                    if has_hi:
                        beta = 0.5 * (beta + beta_hi)
                    else:
                        beta = beta * 2.0
                else:
                    has_hi = True
                    beta_hi = beta
                    if has_lo:
                        beta = 0.5 * (beta + beta_lo)
                    else:
                        beta = beta * 0.5
            entropy_gap[i] = fabs(diff)
