"""Closed-loop stability of the position dynamics under price feedback."""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .linalg import eig2


class NoStationaryGain(ValueError):
    """The time-averaged filter matrix is not Hurwitz."""


def _averaged_filter(cov_path, beta, p, window):
    if not cov_path.complete:
        raise ValueError("covariance path has a breakdown")
    if not cov_path.grid.same_as(beta.grid):
        raise ValueError("grid mismatch between covariance path and beta")
    S = cov_path.matrices()
    C = np.stack([beta.values,
                  np.full_like(beta.values, p.gamma_F),
                  np.full_like(beta.values, p.gamma_C)], axis=1)
    K = np.einsum("kij,kj->ki", S, C) / p.obs_var
    A = np.diag([0.0, -p.alpha_m, -p.alpha_c])
    M = A[None] - K[:, :, None] * C[:, None, :]
    if window == "mean":
        return M.mean(axis=0), K.mean(axis=0)
    if window == "terminal":
        return M[-1], K[-1]
    raise ValueError(f"unknown averaging window: {window}")


def dc_gains(cov_path, beta, p, window="mean"):
    """Stationary price response (G_m, G_c) to a sustained unit shift in m or c.

    A shift in m adds gamma_F to the observation drift; the frozen filter
    x' = M x + K u passes a constant input u to the price with DC gain
    g = e1^T (-M)^{-1} K, so G_m = gamma_F g and G_c = gamma_C g.
    """
    M, K = _averaged_filter(cov_path, beta, p, window)
    if not _kernels.max_real_eig3(np.ascontiguousarray(M)) < 0:
        raise NoStationaryGain("no stationary gain: averaged filter matrix is not Hurwitz")
    g = float(np.linalg.solve(-M, K)[0])
    return p.gamma_F * g, p.gamma_C * g


def feedback_matrix(G_m, G_c, p):
    return np.array([[p.kappa_m * G_m, p.kappa_m * G_c],
                     [-p.kappa_c * G_m, -p.kappa_c * G_c]])


@dataclass(frozen=True, eq=False)
class StabilityReport:
    G_m: float
    G_c: float
    F: np.ndarray
    A_eff: np.ndarray
    eig_A_eff: tuple
    rho_F: float
    norm_inf: float
    norm_1: float
    min_alpha: float
    spectral_ok: bool
    norm_inf_ok: bool
    norm_1_ok: bool
    hurwitz: bool

    def to_dict(self):
        return {
            "G_m": self.G_m, "G_c": self.G_c,
            "F": self.F.tolist(), "A_eff": self.A_eff.tolist(),
            "eig_A_eff_real": [e.real for e in self.eig_A_eff],
            "eig_A_eff_imag": [e.imag for e in self.eig_A_eff],
            "rho_F": self.rho_F, "norm_inf": self.norm_inf, "norm_1": self.norm_1,
            "min_alpha": self.min_alpha, "spectral_ok": self.spectral_ok,
            "norm_inf_ok": self.norm_inf_ok, "norm_1_ok": self.norm_1_ok,
            "hurwitz": self.hurwitz,
        }


def check_stability(F, p, G_m=None, G_c=None):
    """Spectral radius and induced-norm tests on F, and the spectrum of A_eff = -D + F."""
    F = np.asarray(F, dtype=float)
    det = F[0, 0] * F[1, 1] - F[0, 1] * F[1, 0]
    if abs(det) <= 8 * np.finfo(float).eps * np.sum(F * F):
        # numerically rank <= 1: eigenvalues are trace and 0; the quadratic
        # formula would return sqrt(rounding error) for a nilpotent F
        rho = abs(F[0, 0] + F[1, 1])
    else:
        rho = max(abs(e) for e in eig2(F))
    norm_inf = float(np.max(np.abs(F).sum(axis=1)))
    norm_1 = float(np.max(np.abs(F).sum(axis=0)))
    A_eff = np.diag([-p.alpha_m, -p.alpha_c]) + F
    eig = eig2(A_eff)
    min_alpha = min(p.alpha_m, p.alpha_c)
    return StabilityReport(
        G_m=G_m, G_c=G_c, F=F, A_eff=A_eff, eig_A_eff=eig, rho_F=float(rho),
        norm_inf=norm_inf, norm_1=norm_1, min_alpha=min_alpha,
        spectral_ok=bool(rho < min_alpha), norm_inf_ok=bool(norm_inf < min_alpha),
        norm_1_ok=bool(norm_1 < min_alpha), hurwitz=bool(eig[0].real < 0))


def stability_report(G_m, G_c, p):
    return check_stability(feedback_matrix(G_m, G_c, p), p, G_m, G_c)
