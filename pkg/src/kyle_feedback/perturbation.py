"""First-order sensitivity of the covariance flow and comparative statics."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .equilibrium import solve_pontryagin
from .model import CovMatrix, drift_matrix, entries_to_matrix, l2_norm

_DIRECTIONS = {"gamma_F": (1.0, 0.0), "gamma_C": (0.0, 1.0)}


def _mat(sigma):
    return sigma.to_matrix() if isinstance(sigma, CovMatrix) else np.asarray(sigma, float)


def _row(beta_t, p):
    return np.array([beta_t, p.gamma_F, p.gamma_C])


def linearized_rhs(H, sigma0, beta0_t, p):
    """L[H] = A H + H A^T - (H C^T C Sigma + Sigma C^T C H) / R.

    C is the measurement row at the baseline, (beta, gamma_F, gamma_C); at
    h = 0 this is (beta, 0, 0).
    """
    H = np.asarray(H, dtype=float)
    S = _mat(sigma0)
    A = drift_matrix(p)
    c = _row(beta0_t, p)
    CC = np.outer(c, c)
    R = p.obs_var
    return A @ H + H @ A.T - (H @ CC @ S + S @ CC @ H) / R


def forcing_term(sigma0, beta0_t, p, param="gamma_F"):
    """Derivative of the Riccati field in gamma_F (or gamma_C) at fixed Sigma."""
    S = _mat(sigma0)
    c = _row(beta0_t, p)
    d = np.zeros(3)
    d[1:] = _DIRECTIONS[param]
    R = p.obs_var
    return -S @ (np.outer(d, c) + np.outer(c, d)) @ S / R


@dataclass(frozen=True, eq=False)
class SensitivityPath:
    grid: object
    entries: np.ndarray
    param: str = "gamma_F"

    @property
    def sigma1(self):
        return entries_to_matrix(self.entries)

    @property
    def dvv(self):
        return self.entries[:, 0]


def integrate_sensitivity(cov_path0, beta0, p, param="gamma_F", forcing_scale=1.0):
    """Co-integrate Sigma^(1) = dSigma/dparam with the baseline flow by RK4.

    kappa_m and kappa_c do not enter the covariance flow, so their
    sensitivities are identically zero.
    """
    if not cov_path0.complete:
        raise ValueError("baseline covariance path has a breakdown")
    if not cov_path0.grid.same_as(beta0.grid):
        raise ValueError("grid mismatch between baseline path and beta")
    grid = beta0.grid
    if param in ("kappa_m", "kappa_c"):
        return SensitivityPath(grid, np.zeros((grid.n_nodes, 6)), param)
    if param not in _DIRECTIONS:
        raise ValueError(f"unsupported sensitivity parameter: {param}")
    dF, dC = (forcing_scale * x for x in _DIRECTIONS[param])
    _, H = _kernels.rk4_tangent(np.ascontiguousarray(cov_path0.entries[0]), beta0.values,
                                np.ascontiguousarray(beta0.midpoints()), grid.dt,
                                *p.params_array(), dF, dC)
    return SensitivityPath(grid, H, param)


@dataclass(frozen=True, eq=False)
class ComparativeStatics:
    eps: float
    dJ_dgammaF: float
    dbeta_norm: float
    dbeta_dgammaF: np.ndarray
    dSigma_vv_profile: np.ndarray
    dvv_linear: np.ndarray
    converged: bool

    def to_dict(self):
        return {"eps": self.eps, "dJ_dgammaF": self.dJ_dgammaF,
                "dbeta_norm": self.dbeta_norm, "converged": self.converged,
                "max_abs_profile_gap": float(np.max(np.abs(self.dSigma_vv_profile
                                                           - self.dvv_linear)))}


def comparative_statics(sol0, p, eps=1e-3, tol=None, threads=1, **solve_kw):
    """Central differences of the equilibrium in gamma_F around sol0.

    Re-solves at gamma_F +- eps with the baseline initial covariance and grid.
    Also returns the Sigma_vv sensitivity predicted by the tangent flow
    along the baseline intensity.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    tol = sol0.tol if tol is None else tol
    sigma0 = sol0.cov_path.sigma(0)
    grid = sol0.grid

    def solve(sign):
        ps = p.replace(gamma_F=p.gamma_F + sign * eps)
        return solve_pontryagin(ps, init_beta=sol0.beta_star, tol=tol, sigma0=sigma0,
                                **solve_kw)

    if threads > 1:
        with ThreadPoolExecutor(2) as ex:
            plus, minus = ex.map(solve, (1.0, -1.0))
    else:
        plus, minus = solve(1.0), solve(-1.0)
    dJ = (plus.profit_J - minus.profit_J) / (2 * eps)
    dbeta = (plus.beta_star.values - minus.beta_star.values) / (2 * eps)
    dvv = (plus.cov_path.vv - minus.cov_path.vv) / (2 * eps)
    lin = integrate_sensitivity(sol0.cov_path, sol0.beta_star, p).dvv
    return ComparativeStatics(eps, float(dJ), l2_norm(dbeta, grid.dt), dbeta, dvv, lin,
                              bool(plus.converged and minus.converged))


def sensitivity_rows(sens, dvv_fd=None):
    header = ["t", "dvv_linear", "dvv_fd", "abs_gap"]
    t = sens.grid.times
    rows = []
    for k in range(len(t)):
        fd = np.nan if dvv_fd is None else dvv_fd[k]
        rows.append([t[k], sens.dvv[k], fd, abs(sens.dvv[k] - fd)])
    return header, rows
