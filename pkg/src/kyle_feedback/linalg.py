"""Closed-form small eigenvalue problems."""

import cmath

import numpy as np

from . import _kernels


def sym3_eigvals(entries):
    """Ascending eigenvalues of the symmetric 3x3 given by its six stored entries."""
    e = np.ascontiguousarray(entries, dtype=float)
    return np.array(_kernels.sym3_eigvals(e))


def max_real_eig3(M):
    """Largest eigenvalue real part of a general 3x3 matrix."""
    return float(_kernels.max_real_eig3(np.ascontiguousarray(M, dtype=float)))


def eig2(M):
    """Both eigenvalues of a 2x2 matrix as complex numbers, larger real part first."""
    a, b = M[0][0], M[0][1]
    c, d = M[1][0], M[1][1]
    half_tr = 0.5 * (a + d)
    root = cmath.sqrt(0.25 * (a - d) ** 2 + b * c)
    return half_tr + root, half_tr - root
