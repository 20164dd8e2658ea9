"""Pure-Python twins of the compiled kernels in ``_kernels.pyx``.

Same arguments, same in-place updates, same return values.  Used when the
extension is not built or when ``DSLAB_PURE_PYTHON=1``.
"""

import math

import numpy as np


def dual_cd(Z, alpha, w, max_epochs, tol):
    n = Z.shape[0]
    q = np.einsum("ij,ij->i", Z, Z)
    epoch = 0
    viol = 0.0
    while epoch < max_epochs:
        epoch += 1
        viol = 0.0
        for i in range(n):
            zi = Z[i]
            g = float(zi @ w) - 1.0
            a_old = alpha[i]
            pg = 0.0 if (a_old == 0.0 and g > 0.0) else g
            viol = max(viol, abs(pg))
            if pg != 0.0:
                a_new = max(a_old - g / q[i], 0.0)
                delta = a_new - a_old
                if delta != 0.0:
                    alpha[i] = a_new
                    w += delta * zi
        if viol < tol:
            break
    return epoch, viol


def perceptron_epochs(X, y, w, order, epochs):
    mistakes = 0
    for _ in range(epochs):
        mistakes = 0
        for i in order:
            if y[i] * float(X[i] @ w) <= 0.0:
                mistakes += 1
                w += y[i] * X[i]
    return mistakes


def minover(Z, w, max_iter, tol, window):
    it = 0
    kappa = -math.inf
    ref = -math.inf
    while it < max_iter:
        it += 1
        h = Z @ w
        imin = int(np.argmin(h))
        nrm = math.sqrt(float(w @ w))
        if nrm > 0.0 and h[imin] / nrm > kappa:
            kappa = h[imin] / nrm
        if it % window == 0:
            if ref > -math.inf and kappa - ref <= tol * abs(kappa):
                break
            ref = kappa
        w += Z[imin]
    return it, kappa
