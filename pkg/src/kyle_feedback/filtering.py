"""Kalman-Bucy filter layer: gains, price impact, error dynamics and the
filter instability exponent."""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .model import CovMatrix, MeasurementVec, StateVec, drift_matrix, measurement_vec
from .riccati import riccati_rhs


def _as_entries(sigma):
    return sigma.as_array() if isinstance(sigma, CovMatrix) else np.asarray(sigma, float)


def _as_row(c):
    return c.as_array() if isinstance(c, MeasurementVec) else np.asarray(c, float)


def kalman_gain(sigma, c, R):
    """K = Sigma C^T / R."""
    if not R > 0:
        raise ValueError("R must be positive")
    S = sigma.to_matrix() if isinstance(sigma, CovMatrix) else np.asarray(sigma, float)
    return S @ _as_row(c) / R


def price_impact(sigma, c, R, variant="canonical"):
    """Price impact coefficient.

    canonical: e1^T K = (beta Svv + gF Svm + gC Svc) / R, the filter-implied
    sensitivity of the price to order flow.  literal: Svv * beta.
    """
    if not R > 0:
        raise ValueError("R must be positive")
    e = _as_entries(sigma)
    b, gF, gC = _as_row(c)
    if variant == "canonical":
        return float((b * e[0] + gF * e[1] + gC * e[2]) / R)
    if variant == "literal":
        return float(e[0] * b)
    raise ValueError(f"unknown price impact variant: {variant}")


def error_matrix(sigma, beta_t, p):
    """M = A - K C, the drift of the filter error e = x - xhat."""
    c = measurement_vec(beta_t, p).as_array()
    K = kalman_gain(sigma, c, p.obs_var)
    return drift_matrix(p) - np.outer(K, c)


@dataclass(frozen=True, eq=False)
class GainPath:
    grid: object
    gains: np.ndarray
    impacts: np.ndarray
    max_real_eig: np.ndarray


def gain_path(cov_path, beta, p, variant="canonical"):
    """Kalman gains, price impacts and error-matrix spectra along a covariance path."""
    if not cov_path.complete:
        raise ValueError("covariance path has a breakdown")
    if not cov_path.grid.same_as(beta.grid):
        raise ValueError("grid mismatch between covariance path and beta")
    S = cov_path.matrices()
    C = np.stack([beta.values,
                  np.full_like(beta.values, p.gamma_F),
                  np.full_like(beta.values, p.gamma_C)], axis=1)
    R = p.obs_var
    K = np.einsum("kij,kj->ki", S, C) / R
    if variant == "canonical":
        lam = K[:, 0].copy()
    elif variant == "literal":
        lam = cov_path.vv * beta.values
    else:
        raise ValueError(f"unknown price impact variant: {variant}")
    M = drift_matrix(p)[None, :, :] - K[:, :, None] * C[:, None, :]
    eig = np.array([_kernels.max_real_eig3(np.ascontiguousarray(m)) for m in M])
    return GainPath(cov_path.grid, K, lam, eig)


@dataclass(frozen=True, eq=False)
class InstabilityReport:
    Lambda: float
    argmax_time: float
    eigen_trajectory: np.ndarray

    @property
    def unstable(self):
        return self.Lambda > 0


def lambda_sup(cov_path, beta, p):
    """Lambda(h) = max over grid nodes of the largest eigenvalue real part of M_t."""
    gp = gain_path(cov_path, beta, p)
    k = int(np.argmax(gp.max_real_eig))
    return InstabilityReport(float(gp.max_real_eig[k]), float(cov_path.grid.times[k]),
                             gp.max_real_eig)


def filter_step(xhat, sigma, dY, dP_known, beta_t, p, dt):
    """One Euler step of the filter mean and covariance.

    The price move dP_known enters the m and c means as the known input
    (0, kappa_m dP, -kappa_c dP); the covariance is advanced with the
    Riccati right-hand side.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = xhat.as_array()
    c = measurement_vec(beta_t, p).as_array()
    K = kalman_gain(sigma, c, p.obs_var)
    u = np.array([0.0, p.kappa_m * dP_known, -p.kappa_c * dP_known])
    innov = dY - c @ x * dt
    x_new = x + drift_matrix(p) @ x * dt + u + K * innov
    s_new = sigma.as_array() + dt * riccati_rhs(sigma, beta_t, p).as_array()
    return StateVec(*x_new), CovMatrix.from_array(s_new)


def gain_path_rows(gp):
    header = ["t", "K1", "K2", "K3", "lambda_impact", "maxRe_eig_M"]
    t = gp.grid.times
    rows = [[t[k], *gp.gains[k], gp.impacts[k], gp.max_real_eig[k]] for k in range(len(t))]
    return header, rows
