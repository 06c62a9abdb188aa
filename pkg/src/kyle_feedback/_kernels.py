"""Compiled inner loops.

Covariance and adjoint matrices are carried as 6-vectors ordered
(vv, vm, vc, mm, mc, cc).  Model constants are passed as the scalars
gF, gC, am, ac, qm, qc, R (see ModelParams.params_array).
"""

import math

import numpy as np
from numba import njit

OK, PSD_LOSS, DIVERGENCE = 0, 1, 2

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def riccati_rhs6(S, b, gF, gC, am, ac, qm, qc, R, out):
    vv, vm, vc, mm, mc, cc = S[0], S[1], S[2], S[3], S[4], S[5]
    # s = Sigma C^T
    sv = b * vv + gF * vm + gC * vc
    sm = b * vm + gF * mm + gC * mc
    sc = b * vc + gF * mc + gC * cc
    out[0] = -sv * sv / R
    out[1] = -am * vm - sv * sm / R
    out[2] = -ac * vc - sv * sc / R
    out[3] = -2.0 * am * mm + qm - sm * sm / R
    out[4] = -(am + ac) * mc - sm * sc / R
    out[5] = -2.0 * ac * cc + qc - sc * sc / R


@njit(**_JIT)
def sym3_eigvals(S):
    """Ascending eigenvalues of a symmetric 3x3 (trigonometric closed form)."""
    a00, a01, a02, a11, a12, a22 = S[0], S[1], S[2], S[3], S[4], S[5]
    p1 = a01 * a01 + a02 * a02 + a12 * a12
    if p1 == 0.0:
        e = np.array([a00, a11, a22])
        e.sort()
        return e[0], e[1], e[2]
    q = (a00 + a11 + a22) / 3.0
    d0, d1, d2 = a00 - q, a11 - q, a22 - q
    p2 = d0 * d0 + d1 * d1 + d2 * d2 + 2.0 * p1
    p = math.sqrt(p2 / 6.0)
    b00, b11, b22 = d0 / p, d1 / p, d2 / p
    b01, b02, b12 = a01 / p, a02 / p, a12 / p
    det = (b00 * (b11 * b22 - b12 * b12) - b01 * (b01 * b22 - b12 * b02)
           + b02 * (b01 * b12 - b11 * b02))
    r = 0.5 * det
    if r <= -1.0:
        phi = math.pi / 3.0
    elif r >= 1.0:
        phi = 0.0
    else:
        phi = math.acos(r) / 3.0
    e_max = q + 2.0 * p * math.cos(phi)
    e_min = q + 2.0 * p * math.cos(phi + 2.0 * math.pi / 3.0)
    e_mid = 3.0 * q - e_max - e_min
    return e_min, e_mid, e_max


@njit(**_JIT)
def _max_real_eig2(a, b, c, d):
    half_tr = 0.5 * (a + d)
    disc = 0.25 * (a - d) * (a - d) + b * c
    if disc >= 0.0:
        return half_tr + math.sqrt(disc)
    return half_tr


@njit(**_JIT)
def _polish(lam, a2, a1, a0):
    # Newton refinement on lam^3 + a2 lam^2 + a1 lam + a0, kept only if it helps
    f = ((lam + a2) * lam + a1) * lam + a0
    for _ in range(3):
        fp = (3.0 * lam + 2.0 * a2) * lam + a1
        if fp == 0.0:
            break
        nxt = lam - f / fp
        fn = ((nxt + a2) * nxt + a1) * nxt + a0
        if abs(fn) >= abs(f):
            break
        lam, f = nxt, fn
    return lam


@njit(**_JIT)
def max_real_eig3(M):
    """Largest real part among the eigenvalues of a general 3x3 matrix.

    Reducible matrices are split into a 1x1 and a 2x2 block; otherwise the
    characteristic cubic is solved with Cardano's formula.
    """
    for i in range(3):
        j = (i + 1) % 3
        k = (i + 2) % 3
        if (M[i, j] == 0.0 and M[i, k] == 0.0) or (M[j, i] == 0.0 and M[k, i] == 0.0):
            e2 = _max_real_eig2(M[j, j], M[j, k], M[k, j], M[k, k])
            return max(M[i, i], e2)
    tr = M[0, 0] + M[1, 1] + M[2, 2]
    minors = (M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
              + M[0, 0] * M[2, 2] - M[0, 2] * M[2, 0]
              + M[1, 1] * M[2, 2] - M[1, 2] * M[2, 1])
    det = (M[0, 0] * (M[1, 1] * M[2, 2] - M[1, 2] * M[2, 1])
           - M[0, 1] * (M[1, 0] * M[2, 2] - M[1, 2] * M[2, 0])
           + M[0, 2] * (M[1, 0] * M[2, 1] - M[1, 1] * M[2, 0]))
    a2, a1, a0 = -tr, minors, -det
    shift = a2 / 3.0
    p = a1 - a2 * a2 / 3.0
    q = 2.0 * a2 * a2 * a2 / 27.0 - a2 * a1 / 3.0 + a0
    disc = 0.25 * q * q + p * p * p / 27.0
    if disc > 0.0:
        sq = math.sqrt(disc)
        t = np.cbrt(-0.5 * q + sq) + np.cbrt(-0.5 * q - sq)
        lam = _polish(t - shift, a2, a1, a0)
        # complex pair has real part (trace - real root) / 2
        return max(lam, 0.5 * (tr - lam))
    if p == 0.0:
        return _polish(-shift, a2, a1, a0)
    r = math.sqrt(-p / 3.0)
    arg = (3.0 * q / (2.0 * p)) * math.sqrt(-3.0 / p)
    arg = min(1.0, max(-1.0, arg))
    phi = math.acos(arg) / 3.0
    best = -np.inf
    for k in range(3):
        lam = 2.0 * r * math.cos(phi - 2.0 * math.pi * k / 3.0) - shift
        lam = _polish(lam, a2, a1, a0)
        if lam > best:
            best = lam
    return best


@njit(**_JIT)
def node_status(S, psd_rel, div_thr):
    for i in range(6):
        x = S[i]
        if not math.isfinite(x) or abs(x) > div_thr:
            return DIVERGENCE, np.nan
    e_min, _, _ = sym3_eigvals(S)
    if e_min < -psd_rel * abs(S[0] + S[3] + S[5]):
        return PSD_LOSS, e_min
    return OK, e_min


@njit(**_JIT)
def _rk4_combine(x, k1, k2, k3, k4, dt, out):
    for i in range(6):
        out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@njit(**_JIT)
def rk4_open(S0, bn, bm, dt, gF, gC, am, ac, qm, qc, R, psd_rel, div_thr):
    """RK4 for the Riccati flow under a given intensity (nodes bn, midpoints bm).

    Returns (S, min_eig, n_good, code); rows past n_good are NaN and code
    records the failure mode at node n_good.
    """
    n = bn.shape[0] - 1
    S = np.full((n + 1, 6), np.nan)
    mins = np.full(n + 1, np.nan)
    k1 = np.empty(6)
    k2 = np.empty(6)
    k3 = np.empty(6)
    k4 = np.empty(6)
    y = np.empty(6)
    S[0] = S0
    code, mins[0] = node_status(S[0], psd_rel, div_thr)
    if code != OK:
        return S, mins, 0, code
    for k in range(n):
        x = S[k]
        riccati_rhs6(x, bn[k], gF, gC, am, ac, qm, qc, R, k1)
        for i in range(6):
            y[i] = x[i] + 0.5 * dt * k1[i]
        riccati_rhs6(y, bm[k], gF, gC, am, ac, qm, qc, R, k2)
        for i in range(6):
            y[i] = x[i] + 0.5 * dt * k2[i]
        riccati_rhs6(y, bm[k], gF, gC, am, ac, qm, qc, R, k3)
        for i in range(6):
            y[i] = x[i] + dt * k3[i]
        riccati_rhs6(y, bn[k + 1], gF, gC, am, ac, qm, qc, R, k4)
        _rk4_combine(x, k1, k2, k3, k4, dt, y)
        code, e = node_status(y, psd_rel, div_thr)
        if code != OK:
            return S, mins, k + 1, code
        S[k + 1] = y
        mins[k + 1] = e
    return S, mins, n + 1, OK


@njit(**_JIT)
def foc_beta(S, L, gF, gC, R, bmax):
    """Maximiser of the Hamiltonian in beta, clipped to [0, bmax].

    The Hamiltonian is quadratic in beta: with a = Sigma e1 and
    g = Sigma (0, gF, gC)^T the stationarity condition reads
    R Svv / 2 = a^T L a beta + a^T L g.
    """
    vv, vm, vc, mm, mc, cc = S[0], S[1], S[2], S[3], S[4], S[5]
    g0 = gF * vm + gC * vc
    g1 = gF * mm + gC * mc
    g2 = gF * mc + gC * cc
    la0 = L[0] * vv + L[1] * vm + L[2] * vc
    la1 = L[1] * vv + L[3] * vm + L[4] * vc
    la2 = L[2] * vv + L[4] * vm + L[5] * vc
    ala = vv * la0 + vm * la1 + vc * la2
    alg = g0 * la0 + g1 * la1 + g2 * la2
    num = 0.5 * R * vv - alg
    if not ala > 0.0:
        return bmax if num > 0.0 else 0.0
    b = num / ala
    if b < 0.0:
        return 0.0
    if b > bmax:
        return bmax
    return b


@njit(**_JIT)
def foc_path(S, L, gF, gC, R, bmax):
    n = S.shape[0]
    out = np.empty(n)
    for k in range(n):
        out[k] = foc_beta(S[k], L[k], gF, gC, R, bmax)
    return out


@njit(**_JIT)
def _hermite_mid(Sa, Sb, Fa, Fb, dt, out):
    for i in range(6):
        out[i] = 0.5 * (Sa[i] + Sb[i]) + dt * (Fa[i] - Fb[i]) / 8.0


@njit(**_JIT)
def rk4_closed(S0, Ln, Lm, dt, gF, gC, am, ac, qm, qc, R, bmax, psd_rel, div_thr):
    """Forward Riccati sweep with beta set by the FOC at every RK4 stage.

    Ln, Lm hold the adjoint at nodes and interval midpoints.  Returns
    (S, bn, bm, n_good, code) where bm is the FOC intensity at the Hermite
    midpoint of each interval.
    """
    n = Ln.shape[0] - 1
    S = np.full((n + 1, 6), np.nan)
    bn = np.full(n + 1, np.nan)
    bm = np.full(n, np.nan)
    k1 = np.empty(6)
    k2 = np.empty(6)
    k3 = np.empty(6)
    k4 = np.empty(6)
    y = np.empty(6)
    S[0] = S0
    code, _ = node_status(S[0], psd_rel, div_thr)
    if code != OK:
        return S, bn, bm, 0, code
    for k in range(n):
        x = S[k]
        b1 = foc_beta(x, Ln[k], gF, gC, R, bmax)
        bn[k] = b1
        riccati_rhs6(x, b1, gF, gC, am, ac, qm, qc, R, k1)
        for i in range(6):
            y[i] = x[i] + 0.5 * dt * k1[i]
        riccati_rhs6(y, foc_beta(y, Lm[k], gF, gC, R, bmax), gF, gC, am, ac, qm, qc, R, k2)
        for i in range(6):
            y[i] = x[i] + 0.5 * dt * k2[i]
        riccati_rhs6(y, foc_beta(y, Lm[k], gF, gC, R, bmax), gF, gC, am, ac, qm, qc, R, k3)
        for i in range(6):
            y[i] = x[i] + dt * k3[i]
        riccati_rhs6(y, foc_beta(y, Ln[k + 1], gF, gC, R, bmax), gF, gC, am, ac, qm, qc, R, k4)
        _rk4_combine(x, k1, k2, k3, k4, dt, y)
        code, _ = node_status(y, psd_rel, div_thr)
        if code != OK:
            return S, bn, bm, k + 1, code
        S[k + 1] = y
    bn[n] = foc_beta(S[n], Ln[n], gF, gC, R, bmax)
    Fa = np.empty(6)
    Fb = np.empty(6)
    riccati_rhs6(S[0], bn[0], gF, gC, am, ac, qm, qc, R, Fa)
    for k in range(n):
        riccati_rhs6(S[k + 1], bn[k + 1], gF, gC, am, ac, qm, qc, R, Fb)
        _hermite_mid(S[k], S[k + 1], Fa, Fb, dt, y)
        bm[k] = foc_beta(y, Lm[k], gF, gC, R, bmax)
        for i in range(6):
            Fa[i] = Fb[i]
    return S, bn, bm, n + 1, OK


@njit(**_JIT)
def adjoint_rhs6(L, S, b, gF, gC, am, ac, R, out):
    """Time derivative of the adjoint, -dH/dSigma for H = b Svv + <L, Sigma_dot>."""
    vv, vm, vc, mm, mc, cc = S[0], S[1], S[2], S[3], S[4], S[5]
    sv = b * vv + gF * vm + gC * vc
    sm = b * vm + gF * mm + gC * mc
    sc = b * vc + gF * mc + gC * cc
    l00, l01, l02, l11, l12, l22 = L[0], L[1], L[2], L[3], L[4], L[5]
    # w = L s
    w0 = l00 * sv + l01 * sm + l02 * sc
    w1 = l01 * sv + l11 * sm + l12 * sc
    w2 = l02 * sv + l12 * sm + l22 * sc
    out[0] = -b + 2.0 * w0 * b / R
    out[1] = am * l01 + (w0 * gF + b * w1) / R
    out[2] = ac * l02 + (w0 * gC + b * w2) / R
    out[3] = 2.0 * am * l11 + 2.0 * w1 * gF / R
    out[4] = (am + ac) * l12 + (w1 * gC + gF * w2) / R
    out[5] = 2.0 * ac * l22 + 2.0 * w2 * gC / R


@njit(**_JIT)
def rk4_adjoint(S, bn, bm, dt, LT, gF, gC, am, ac, qm, qc, R):
    """Backward RK4 for the adjoint from L(T) = LT along a stored forward path."""
    n = bn.shape[0] - 1
    L = np.empty((n + 1, 6))
    L[n] = LT
    Fa = np.empty(6)
    Fb = np.empty(6)
    Sm = np.empty(6)
    k1 = np.empty(6)
    k2 = np.empty(6)
    k3 = np.empty(6)
    k4 = np.empty(6)
    y = np.empty(6)
    h = -dt
    riccati_rhs6(S[n], bn[n], gF, gC, am, ac, qm, qc, R, Fb)
    for k in range(n, 0, -1):
        riccati_rhs6(S[k - 1], bn[k - 1], gF, gC, am, ac, qm, qc, R, Fa)
        _hermite_mid(S[k - 1], S[k], Fa, Fb, dt, Sm)
        x = L[k]
        adjoint_rhs6(x, S[k], bn[k], gF, gC, am, ac, R, k1)
        for i in range(6):
            y[i] = x[i] + 0.5 * h * k1[i]
        adjoint_rhs6(y, Sm, bm[k - 1], gF, gC, am, ac, R, k2)
        for i in range(6):
            y[i] = x[i] + 0.5 * h * k2[i]
        adjoint_rhs6(y, Sm, bm[k - 1], gF, gC, am, ac, R, k3)
        for i in range(6):
            y[i] = x[i] + h * k3[i]
        adjoint_rhs6(y, S[k - 1], bn[k - 1], gF, gC, am, ac, R, k4)
        _rk4_combine(x, k1, k2, k3, k4, h, L[k - 1])
        for i in range(6):
            Fb[i] = Fa[i]
    return L


@njit(**_JIT)
def tangent_rhs6(H, S, b, gF, gC, am, ac, R, dF, dC, out):
    """Derivative of the Riccati field along H plus the forcing from C moving
    in the (0, dF, dC) direction."""
    vv, vm, vc, mm, mc, cc = S[0], S[1], S[2], S[3], S[4], S[5]
    sv = b * vv + gF * vm + gC * vc
    sm = b * vm + gF * mm + gC * mc
    sc = b * vc + gF * mc + gC * cc
    h00, h01, h02, h11, h12, h22 = H[0], H[1], H[2], H[3], H[4], H[5]
    # ds = H C^T + Sigma dC^T
    dv = b * h00 + gF * h01 + gC * h02 + dF * vm + dC * vc
    dm = b * h01 + gF * h11 + gC * h12 + dF * mm + dC * mc
    dc = b * h02 + gF * h12 + gC * h22 + dF * mc + dC * cc
    out[0] = -2.0 * sv * dv / R
    out[1] = -am * h01 - (dv * sm + sv * dm) / R
    out[2] = -ac * h02 - (dv * sc + sv * dc) / R
    out[3] = -2.0 * am * h11 - 2.0 * sm * dm / R
    out[4] = -(am + ac) * h12 - (dm * sc + sm * dc) / R
    out[5] = -2.0 * ac * h22 - 2.0 * sc * dc / R


@njit(**_JIT)
def rk4_tangent(S0, bn, bm, dt, gF, gC, am, ac, qm, qc, R, dF, dC):
    """Co-integrate the Riccati flow and its parameter sensitivity with RK4.

    The sensitivity starts at zero; (dF, dC) is the direction of C in the
    (gamma_F, gamma_C) plane and scales the forcing linearly.
    """
    n = bn.shape[0] - 1
    S = np.empty((n + 1, 6))
    H = np.empty((n + 1, 6))
    S[0] = S0
    H[0] = 0.0
    k1 = np.empty(6)
    k2 = np.empty(6)
    k3 = np.empty(6)
    k4 = np.empty(6)
    j1 = np.empty(6)
    j2 = np.empty(6)
    j3 = np.empty(6)
    j4 = np.empty(6)
    y = np.empty(6)
    z = np.empty(6)
    for k in range(n):
        x = S[k]
        u = H[k]
        riccati_rhs6(x, bn[k], gF, gC, am, ac, qm, qc, R, k1)
        tangent_rhs6(u, x, bn[k], gF, gC, am, ac, R, dF, dC, j1)
        for i in range(6):
            y[i] = x[i] + 0.5 * dt * k1[i]
            z[i] = u[i] + 0.5 * dt * j1[i]
        riccati_rhs6(y, bm[k], gF, gC, am, ac, qm, qc, R, k2)
        tangent_rhs6(z, y, bm[k], gF, gC, am, ac, R, dF, dC, j2)
        for i in range(6):
            y[i] = x[i] + 0.5 * dt * k2[i]
            z[i] = u[i] + 0.5 * dt * j2[i]
        riccati_rhs6(y, bm[k], gF, gC, am, ac, qm, qc, R, k3)
        tangent_rhs6(z, y, bm[k], gF, gC, am, ac, R, dF, dC, j3)
        for i in range(6):
            y[i] = x[i] + dt * k3[i]
            z[i] = u[i] + dt * j3[i]
        riccati_rhs6(y, bn[k + 1], gF, gC, am, ac, qm, qc, R, k4)
        tangent_rhs6(z, y, bn[k + 1], gF, gC, am, ac, R, dF, dC, j4)
        _rk4_combine(x, k1, k2, k3, k4, dt, S[k + 1])
        _rk4_combine(u, j1, j2, j3, j4, dt, H[k + 1])
    return S, H
