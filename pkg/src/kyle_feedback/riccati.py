"""Forward covariance Riccati flow, well-posedness monitors and the breakdown scan."""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .model import (CovMatrix, IntensityPath, TimeGrid, entries_to_matrix,
                    ENTRY_NAMES)

MODES = {_kernels.PSD_LOSS: "psd_loss", _kernels.DIVERGENCE: "divergence"}


@dataclass(frozen=True)
class Breakdown:
    time: float
    index: int
    mode: str


@dataclass(frozen=True, eq=False)
class CovPath:
    """Covariance trajectory on a grid; rows after a breakdown are NaN."""
    grid: TimeGrid
    entries: np.ndarray
    psd_min: np.ndarray
    breakdown: Breakdown = None

    @property
    def complete(self):
        return self.breakdown is None

    @property
    def n_good(self):
        return self.grid.n_nodes if self.breakdown is None else self.breakdown.index

    @property
    def vv(self):
        return self.entries[:, 0]

    def sigma(self, k):
        return CovMatrix.from_array(self.entries[k])

    @property
    def sigmas(self):
        return [self.sigma(k) for k in range(self.n_good)]

    def matrices(self):
        return entries_to_matrix(self.entries)


def riccati_rhs(sigma, beta_t, p):
    """Componentwise time derivative of Sigma under intensity beta_t."""
    s = np.ascontiguousarray(sigma.as_array() if isinstance(sigma, CovMatrix) else sigma,
                             dtype=float)
    if not (np.all(np.isfinite(s)) and math.isfinite(beta_t)):
        raise ValueError("riccati_rhs needs finite inputs")
    out = np.empty(6)
    _kernels.riccati_rhs6(s, float(beta_t), *p.params_array(), out)
    return CovMatrix.from_array(out)


def _check_beta(beta, grid=None):
    if not isinstance(beta, IntensityPath):
        raise TypeError("beta must be an IntensityPath")
    if grid is not None and not beta.grid.same_as(grid):
        raise ValueError("grid mismatch between beta and the requested grid")
    if not (np.all(np.isfinite(beta.values)) and np.all(np.isfinite(beta.midpoints()))):
        raise ValueError("beta must be finite on its grid")


def integrate_riccati(beta, sigma0, p, psd_tol=1e-10):
    """RK4 on the six covariance entries under the given intensity path.

    PSD loss (min eigenvalue below -psd_tol * trace) or divergence truncates
    the path and is recorded in `breakdown` instead of raising.
    """
    _check_beta(beta)
    s0 = np.ascontiguousarray(sigma0.as_array(), dtype=float)
    grid = beta.grid
    S, mins, n_good, code = _kernels.rk4_open(
        s0, beta.values, np.ascontiguousarray(beta.midpoints()), grid.dt,
        *p.params_array(), float(psd_tol), p.divergence_threshold())
    bd = None
    if code != _kernels.OK:
        bd = Breakdown(float(n_good * grid.dt), int(n_good), MODES[code])
    return CovPath(grid, S, mins, bd)


@dataclass(frozen=True)
class ScanRecord:
    H: float
    completed: bool
    time: float = None
    mode: str = None


@dataclass(frozen=True)
class BlowupScanResult:
    direction: tuple
    records: list
    H_star_estimate: float = None
    bracket: tuple = None
    monotone: bool = True
    violations: list = field(default_factory=list)
    refinement: list = field(default_factory=list)

    @property
    def found(self):
        return self.bracket is not None

    @property
    def message(self):
        if self.found:
            return f"breakdown threshold H* ~ {self.H_star_estimate:.6g}"
        if self.records and not self.records[0].completed:
            return "breakdown already at the smallest H in range"
        return "no breakdown in range"


def _with_H(p, H, direction):
    r = math.sqrt(H)
    return p.replace(gamma_F=r * direction[0], gamma_C=r * direction[1])


def scan_blowup(p, beta, H_grid, sigma0=None, direction=None, psd_tol=1e-10,
                rel_width=1e-3, threads=1):
    """Scan H = gamma_F^2 + gamma_C^2 along a fixed direction with beta frozen.

    The direction defaults to that of (gamma_F, gamma_C) in p.  The first flip
    from a completed flow to a breakdown is refined by bisection until
    (H_hi - H_lo) <= rel_width * H_hi.
    """
    H_grid = np.asarray(H_grid, dtype=float)
    if H_grid.ndim != 1 or len(H_grid) == 0:
        raise ValueError("H_grid must be a nonempty 1-d sequence")
    if np.any(~np.isfinite(H_grid)) or np.any(H_grid < 0) or np.any(np.diff(H_grid) <= 0):
        raise ValueError("H_grid must be finite, nonnegative and strictly ascending")
    if direction is None:
        direction = (p.gamma_F, p.gamma_C)
    nrm = math.hypot(*direction)
    if nrm == 0:
        raise ValueError("scan direction must be nonzero")
    direction = (direction[0] / nrm, direction[1] / nrm)
    if sigma0 is None:
        sigma0 = CovMatrix.diag(p.sigma_v ** 2, p.var_m0, p.var_c0)

    def run(H):
        path = integrate_riccati(beta, sigma0, _with_H(p, H, direction), psd_tol)
        if path.complete:
            return ScanRecord(float(H), True)
        return ScanRecord(float(H), False, path.breakdown.time, path.breakdown.mode)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            records = list(ex.map(run, H_grid))
    else:
        records = [run(H) for H in H_grid]

    violations = []
    seen_fail = False
    for r in records:
        if not r.completed:
            seen_fail = True
        elif seen_fail:
            violations.append(r.H)

    flip = None
    for a, b in zip(records[:-1], records[1:]):
        if a.completed and not b.completed:
            flip = (a, b)
            break
    if flip is None:
        return BlowupScanResult(direction, records, None, None, not violations, violations)

    lo, hi = flip
    refinement = []
    while hi.H - lo.H > rel_width * hi.H:
        r = run(0.5 * (lo.H + hi.H))
        refinement.append(r)
        if r.completed:
            lo = r
        else:
            hi = r
    return BlowupScanResult(direction, records, 0.5 * (lo.H + hi.H), (lo.H, hi.H),
                            not violations, violations, refinement)


def cov_path_rows(path):
    header = ["t"] + [f"Sigma_{n}" for n in ENTRY_NAMES] + ["psd_min_eig"]
    rows = []
    t = path.grid.times
    for k in range(path.n_good):
        rows.append([t[k], *path.entries[k], path.psd_min[k]])
    return header, rows
