# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the perceptron experiments.

Signatures and semantics match ``_kernels_py`` exactly.
"""

from libc.math cimport fabs, sqrt


cdef inline double _dot(const double[:, ::1] A, Py_ssize_t i, const double[::1] w) noexcept nogil:
    cdef Py_ssize_t j, d = A.shape[1]
    cdef double s = 0.0
    for j in range(d):
        s += A[i, j] * w[j]
    return s


def dual_cd(const double[:, ::1] Z, double[::1] alpha, double[::1] w,
            int max_epochs, double tol):
    """Cyclic coordinate descent on ``min_{a >= 0} |Z^T a|^2 / 2 - sum(a)``.

    ``w`` must equal ``Z^T alpha`` on entry and is kept in sync.  Returns
    ``(epochs, max projected-gradient violation of the last epoch)``.
    """
    cdef Py_ssize_t n = Z.shape[0], d = Z.shape[1], i, j
    cdef int epoch = 0
    cdef double g, pg, a_old, a_new, delta, viol = 0.0, q
    with nogil:
        while epoch < max_epochs:
            epoch += 1
            viol = 0.0
            for i in range(n):
                g = _dot(Z, i, w) - 1.0
                a_old = alpha[i]
                pg = g
                if a_old == 0.0 and g > 0.0:
                    pg = 0.0
                if fabs(pg) > viol:
                    viol = fabs(pg)
                if pg != 0.0:
                    q = 0.0
                    for j in range(d):
                        q += Z[i, j] * Z[i, j]
                    a_new = a_old - g / q
                    if a_new < 0.0:
                        a_new = 0.0
                    delta = a_new - a_old
                    if delta != 0.0:
                        alpha[i] = a_new
                        for j in range(d):
                            w[j] += delta * Z[i, j]
            if viol < tol:
                break
    return epoch, viol


def perceptron_epochs(const double[:, ::1] X, const double[::1] y, double[::1] w,
                      const long[::1] order, int epochs):
    """Rosenblatt updates ``w += y_i x_i`` on mistakes, visiting ``order`` each
    epoch.  Returns the mistake count of the final epoch."""
    cdef Py_ssize_t n = order.shape[0], d = X.shape[1], k, i, j
    cdef int e, mistakes = 0
    with nogil:
        for e in range(epochs):
            mistakes = 0
            for k in range(n):
                i = order[k]
                if y[i] * _dot(X, i, w) <= 0.0:
                    mistakes += 1
                    for j in range(d):
                        w[j] += y[i] * X[i, j]
    return mistakes


def minover(const double[:, ::1] Z, double[::1] w, long max_iter, double tol, long window):
    """MinOver: reinforce the current minimum-stability pattern.

    Stops when the normalised minimum margin gains less than ``tol``
    (relative) over ``window`` iterations.  Returns ``(iterations, kappa)``.
    """
    cdef Py_ssize_t n = Z.shape[0], d = Z.shape[1], i, j, imin
    cdef long it = 0
    cdef double h, hmin, nrm, kappa = -1e300, ref = -1e300
    with nogil:
        while it < max_iter:
            it += 1
            imin = 0
            hmin = 1e300
            for i in range(n):
                h = _dot(Z, i, w)
                if h < hmin:
                    hmin = h
                    imin = i
            nrm = 0.0
            for j in range(d):
                nrm += w[j] * w[j]
            nrm = sqrt(nrm)
            if nrm > 0.0 and hmin / nrm > kappa:
                kappa = hmin / nrm
            if it % window == 0:
                if ref > -1e299 and kappa - ref <= tol * fabs(kappa):
                    break
                ref = kappa
            for j in range(d):
                w[j] += Z[imin, j]
    return it, kappa
