"""Equilibrium intensity: the forward-backward optimality system, the
best-response fixed-point map and its Lipschitz probe, insider profit."""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .filtering import gain_path
from .model import (CovMatrix, IntensityPath, TimeGrid, classical_intensity,
                    entries_to_matrix, initial_covariance, l2_norm, midpoint_values,
                    validate_params)
from .riccati import CovPath, Breakdown, MODES, integrate_riccati

BETA_MAX = 1e6


class SolverBreakdown(RuntimeError):
    """The covariance flow failed for every multiplier tried."""


class DegenerateImpactError(ValueError):
    """Price impact too close to zero for the best-response map."""


class MapEvaluationError(RuntimeError):
    """The fixed-point map could not be evaluated (Riccati breakdown)."""


def _cubic_mid_columns(L):
    n = L.shape[0] - 1
    m = np.empty((n, L.shape[1]))
    m[1:n - 1] = (-L[0:n - 2] + 9 * L[1:n - 1] + 9 * L[2:n] - L[3:n + 1]) / 16
    m[0] = (5 * L[0] + 15 * L[1] - 5 * L[2] + L[3]) / 16
    m[n - 1] = (L[n - 3] - 5 * L[n - 2] + 15 * L[n - 1] + 5 * L[n]) / 16
    return m


@dataclass(frozen=True, eq=False)
class AdjointPath:
    grid: TimeGrid
    entries: np.ndarray
    p_multiplier: float

    def matrices(self):
        return entries_to_matrix(self.entries)


@dataclass(frozen=True, eq=False)
class EquilibriumSolution:
    params: object
    beta_star: IntensityPath
    cov_path: CovPath
    adjoint: AdjointPath
    lambda_path: np.ndarray
    profit_J: float
    profit_truncated: float
    terminal_gap: float
    fixed_point_gap: float
    iterations: int
    converged: bool
    p_multiplier: float
    tail_width: float
    shooting_monotone: bool
    tol: float
    message: str = ""

    @property
    def residuals(self):
        return {"terminal_gap": self.terminal_gap, "fixed_point_gap": self.fixed_point_gap}

    @property
    def grid(self):
        return self.beta_star.grid

    def summary(self):
        return {
            "J": self.profit_J,
            "J_truncated": self.profit_truncated,
            "residuals": self.residuals,
            "iterations": self.iterations,
            "converged": self.converged,
            "p_multiplier": self.p_multiplier,
            "tail_width": self.tail_width,
            "shooting_monotone": self.shooting_monotone,
            "message": self.message,
        }


def expected_profit(beta, cov_path):
    """Trapezoidal integral of beta_t Svv(t) over the (truncated) grid."""
    if not beta.grid.same_as(cov_path.grid):
        raise ValueError("grid mismatch between beta and covariance path")
    if not cov_path.complete:
        raise ValueError("covariance path has a breakdown")
    return float(np.trapezoid(beta.values * cov_path.vv, dx=beta.grid.dt))


def profit_tail(p, sigma_end, p_multiplier, delta):
    """Profit earned on [T - delta, T] with the adjoint frozen at p e1 e1^T.

    There the optimal rule gives beta Svv = R/(2p) - (gF Svm + gC Svc) and Svv
    falls linearly to zero; the cross terms are taken to decay linearly too.
    """
    cross = p.gamma_F * sigma_end[1] + p.gamma_C * sigma_end[2]
    return delta * p.obs_var / (2.0 * p_multiplier) - 0.5 * delta * cross


@dataclass
class _Sweep:
    p_mult: float
    S: np.ndarray = None
    bn: np.ndarray = None
    bm: np.ndarray = None
    L_adj: np.ndarray = None
    L_relaxed: np.ndarray = None
    term: float = -np.inf
    gap: float = np.inf
    iterations: int = 0
    failed: bool = False
    breakdown: Breakdown = None

    @property
    def score(self):
        return max(abs(self.term), self.gap) if not self.failed else np.inf


def _run_sweeps(p_mult, L0, S0, grid, prm, delta, tol, omega, max_iters, psd_tol, div_thr):
    gF, gC, am, ac, qm, qc, R = prm
    dt = grid.dt
    LT = np.array([p_mult, 0.0, 0.0, 0.0, 0.0, 0.0])
    L = L0.copy()
    out = _Sweep(p_mult)
    prev = np.inf
    L_good = None  # last adjoint whose forward sweep completed
    for it in range(1, max_iters + 1):
        Lm = _cubic_mid_columns(L)
        S, bn, bm, n_good, code = _kernels.rk4_closed(
            S0, L, Lm, dt, *prm, BETA_MAX, psd_tol, div_thr)
        out.iterations = it
        if code != _kernels.OK:
            out.breakdown = Breakdown(float(n_good * dt), int(n_good), MODES[code])
            if L_good is None or omega <= 1.0 / 64:
                out.failed = True
                return out
            # backtrack towards the last completed iterate with a smaller step
            omega /= 2
            L = (1.0 - omega) * L_good + omega * out.L_adj
            continue
        L_good = L
        out.breakdown = None
        L_adj = _kernels.rk4_adjoint(S, bn, bm, dt, LT, *prm)
        gap = l2_norm(bn - _kernels.foc_path(S, L_adj, gF, gC, R, BETA_MAX), dt)
        if gap > prev:
            omega = max(omega / 2, 1.0 / 64)
        prev = gap
        out.S, out.bn, out.bm, out.L_adj, out.gap = S, bn, bm, L_adj, gap
        out.term = S[-1, 0] - delta * R / (4.0 * p_mult ** 2)
        if not (np.isfinite(gap) and np.isfinite(out.term)):
            out.failed = True
            return out
        if gap < tol:
            break
        L = (1.0 - omega) * L + omega * L_adj
    out.L_relaxed = L
    return out


def _initial_adjoint(beta, S0, p_mult, prm, psd_tol, div_thr):
    grid = beta.grid
    S, _, n_good, code = _kernels.rk4_open(S0, beta.values, np.ascontiguousarray(beta.midpoints()),
                                          grid.dt, *prm, psd_tol, div_thr)
    LT = np.array([p_mult, 0.0, 0.0, 0.0, 0.0, 0.0])
    if code != _kernels.OK:
        return np.tile(LT, (grid.n_nodes, 1))
    return _kernels.rk4_adjoint(S, beta.values, np.ascontiguousarray(beta.midpoints()),
                                grid.dt, LT, *prm)


def solve_pontryagin(p, init_beta=None, tol=1e-8, sigma0=None, n_steps=1000, n_cut=10,
                     omega=0.5, max_iters=200, max_shoot=200, psd_tol=1e-10,
                     impact_variant="canonical"):
    """Solve the forward-backward optimality system for the equilibrium intensity.

    Each sweep integrates the covariance forward with beta given by the
    first-order condition against the current adjoint, then integrates the
    adjoint backward from L(T) = p e1 e1^T; the adjoint is relaxed with
    weight omega.  The multiplier p is found by bracketed bisection on the
    terminal residual Svv(T) computed with the analytic tail over the last
    n_cut steps.
    """
    if not tol > 0:
        raise ValueError("tolerance must be positive")
    validate_params(p)
    if init_beta is not None:
        grid = init_beta.grid
    else:
        grid = TimeGrid(p.T, n_steps).truncated(n_cut)
    delta = p.T - grid.T
    if not delta > 0:
        raise ValueError("the solver grid must stop short of the horizon")
    sig0 = initial_covariance(p) if sigma0 is None else sigma0
    S0 = np.ascontiguousarray(sig0.as_array(), dtype=float)
    prm = p.params_array()
    R = prm[-1]
    div_thr = p.divergence_threshold()
    p0 = math.sqrt(R * p.T) / (2.0 * math.sqrt(S0[0]))
    if init_beta is None:
        init_beta = classical_intensity(grid, p, S0[0], horizon=p.T)

    evaluations = []
    warm = {}  # last completed sweep: multiplier and relaxed adjoint
    total = [0]

    def attempt(pm):
        if not warm:
            L0 = _initial_adjoint(init_beta, S0, pm, prm, psd_tol, div_thr)
        else:
            L0 = warm["L"].copy()
            L0[:, 0] += pm - warm["p"]
        sw = _run_sweeps(pm, L0, S0, grid, prm, delta, tol, omega, max_iters,
                         psd_tol, div_thr)
        total[0] += sw.iterations
        if not sw.failed:
            warm["p"], warm["L"] = pm, sw.L_relaxed
            if sw.gap < tol:
                evaluations.append((pm, sw.term))
        return sw

    def evaluate(pm):
        # continuation in the multiplier from the last completed sweep
        sw = attempt(pm)
        if not sw.failed or not warm:
            return sw
        step = 0.5 * (pm - warm["p"])
        for _ in range(60):
            if abs(step) < 1e-9 * pm:
                break
            q = warm["p"] + step
            trial = attempt(q)
            if trial.failed:
                step *= 0.5
                continue
            sw = attempt(pm)
            if not sw.failed:
                return sw
            step = 0.5 * (pm - warm["p"])
        return sw

    def done(sw):
        return not sw.failed and abs(sw.term) < tol and sw.gap < tol

    def better(a, b):
        return a if a.score < b.score else b

    # locate a multiplier whose sweep completes, moving up from the classical value
    pm = p0
    sw = evaluate(pm)
    best = sw
    for _ in range(60):
        if not sw.failed:
            break
        pm *= 2.0
        sw = evaluate(pm)
    if sw.failed:
        raise SolverBreakdown(
            "covariance flow broke down for every multiplier tried"
            + (f" ({sw.breakdown.mode} at t={sw.breakdown.time:.6g})" if sw.breakdown else ""))
    best = sw
    lo = hi = None
    if done(sw):
        lo = hi = pm
    elif sw.term < 0:
        lo = pm
        for _ in range(60):
            pm *= 2.0
            sw = evaluate(pm)
            best = better(sw, best)
            if not sw.failed and sw.term >= 0:
                hi = pm
                break
            lo = pm
    else:
        hi = pm
        for _ in range(60):
            pm *= 0.5
            sw = evaluate(pm)
            best = better(sw, best)
            if sw.failed or sw.term < 0:
                lo = pm
                break
            hi = pm
    if hi is None or lo is None:
        raise SolverBreakdown("could not bracket the multiplier")

    converged = done(sw)
    for _ in range(max_shoot):
        if converged:
            break
        pm = 0.5 * (lo + hi)
        if pm <= lo or pm >= hi:
            break
        sw = evaluate(pm)
        best = better(sw, best)
        if sw.failed or sw.term < 0:
            lo = pm
        else:
            hi = pm
        converged = done(sw)
    if converged:
        best = sw
    return _finish(p, grid, delta, best, converged, total[0], evaluations, tol, impact_variant)


def _finish(p, grid, delta, sw, converged, iterations, evaluations, tol, impact_variant):
    ev = sorted(evaluations)
    terms = [t for _, t in ev]
    monotone = all(b >= a for a, b in zip(terms[:-1], terms[1:]))
    beta = IntensityPath(grid, sw.bn, sw.bm)
    mins = np.array([_kernels.sym3_eigvals(np.ascontiguousarray(s))[0] for s in sw.S])
    cov = CovPath(grid, sw.S, mins, None)
    adj = AdjointPath(grid, sw.L_adj, sw.p_mult)
    lam = gain_path(cov, beta, p, impact_variant).impacts
    J_trunc = expected_profit(beta, cov)
    J = J_trunc + profit_tail(p, sw.S[-1], sw.p_mult, delta)
    if converged:
        msg = "converged"
    else:
        msg = (f"not converged: terminal gap {sw.term:.3g}, fixed-point gap {sw.gap:.3g} "
               f"(tol {tol:.3g})")
    return EquilibriumSolution(p, beta, cov, adj, lam, float(J), float(J_trunc),
                               float(sw.term), float(sw.gap), int(iterations),
                               bool(converged), float(sw.p_mult), float(delta),
                               bool(monotone), float(tol), msg)


def fixed_point_map(beta, p, sigma0=None, variant="literal", frozen_sigma_vv=None,
                    floor=1e-10, psd_tol=1e-10):
    """Best-response map F(beta)_t = 1 / (2 lambda_t(beta)).

    lambda defaults to the literal Svv * beta; variant="canonical" uses the
    filter-implied impact.  frozen_sigma_vv bypasses the Riccati flow with a
    constant Svv (diagnostic mode).
    """
    if frozen_sigma_vv is not None:
        lam = frozen_sigma_vv * beta.values
        if variant == "canonical":
            lam = lam / p.obs_var
    else:
        sig0 = initial_covariance(p) if sigma0 is None else sigma0
        cp = integrate_riccati(beta, sig0, p, psd_tol)
        if not cp.complete:
            bd = cp.breakdown
            raise MapEvaluationError(f"Riccati breakdown ({bd.mode}) at t={bd.time:.6g}")
        lam = gain_path(cp, beta, p, variant).impacts
    if np.any(~np.isfinite(lam)) or np.any(np.abs(lam) < floor):
        raise DegenerateImpactError(f"price impact below floor {floor:g}")
    return IntensityPath(beta.grid, 1.0 / (2.0 * lam))


def estimate_lipschitz(beta, p, n_probes=8, eps=1e-5, seed=0, **map_kw):
    """Largest ||F(beta + eps d) - F(beta)|| / eps over random unit directions d.

    Directions are normalised in the discrete L2 norm and drawn from a
    generator keyed by (seed, probe index).  The result is a lower bound on
    the Lipschitz constant of F near beta.
    """
    if not (isinstance(n_probes, (int, np.integer)) and n_probes >= 1):
        raise ValueError("n_probes must be a positive integer")
    base = beta.nodal()
    dt = base.grid.dt
    f0 = fixed_point_map(base, p, **map_kw).values
    best = 0.0
    for i in range(n_probes):
        rng = np.random.default_rng([int(seed), i])
        d = rng.standard_normal(base.grid.n_nodes)
        d /= l2_norm(d, dt)
        pert = IntensityPath(base.grid, base.values + eps * d)
        f1 = fixed_point_map(pert, p, **map_kw).values
        best = max(best, l2_norm(f1 - f0, dt) / eps)
    return best


@dataclass(frozen=True, eq=False)
class ContractionProbe:
    h_values: np.ndarray
    L_estimates: np.ndarray
    errors: list = field(default_factory=list)

    @property
    def crossing(self):
        above = np.nonzero(self.L_estimates > 1.0)[0]
        return float(self.h_values[above[0]]) if len(above) else None


def contraction_probe(p_base, scales, beta, n_probes=8, seed=0, eps=1e-5, **map_kw):
    """Lipschitz estimates of the map along the ray s * h(p_base) at a fixed beta."""
    h_norm = p_base.feedback().norm
    hs, Ls, errs = [], [], []
    for s in scales:
        ps = p_base.scaled_feedback(s)
        hs.append(s * h_norm)
        try:
            Ls.append(estimate_lipschitz(beta, ps, n_probes, eps, seed, **map_kw))
            errs.append(None)
        except (MapEvaluationError, DegenerateImpactError) as exc:
            Ls.append(np.nan)
            errs.append(str(exc))
    return ContractionProbe(np.array(hs), np.array(Ls), errs)


@dataclass(frozen=True)
class ContinuityRow:
    scale: float
    h_norm: float
    deviation: float
    converged: bool
    error: str = None


@dataclass(frozen=True)
class ContinuityTable:
    rows: list
    baseline_converged: bool

    @property
    def deviations(self):
        return np.array([r.deviation for r in self.rows])

    @property
    def ratios(self):
        d = self.deviations
        return d[1:] / d[:-1]

    @property
    def decreasing(self):
        d = self.deviations
        return bool(np.all(np.isfinite(d)) and np.all(np.diff(d) < 0))


def continuity_check(p_base, h_scales, sigma0=None, n_steps=1000, tol=1e-10, threads=1,
                     **solve_kw):
    """Deviation ||beta*(s h) - beta*(0)||_2 for each scale s (given in descending order)."""
    h_scales = [float(s) for s in h_scales]
    if any(b >= a for a, b in zip(h_scales[:-1], h_scales[1:])):
        raise ValueError("h_scales must be strictly descending")
    h_norm = p_base.feedback().norm
    base = solve_pontryagin(p_base.scaled_feedback(0.0), sigma0=sigma0, n_steps=n_steps,
                            tol=tol, **solve_kw)

    def row(s):
        try:
            sol = solve_pontryagin(p_base.scaled_feedback(s), sigma0=sigma0, n_steps=n_steps,
                                   tol=tol, **solve_kw)
        except (SolverBreakdown, ValueError) as exc:
            return ContinuityRow(s, s * h_norm, np.nan, False, str(exc))
        dev = l2_norm(sol.beta_star.values - base.beta_star.values, base.grid.dt)
        return ContinuityRow(s, s * h_norm, dev, sol.converged)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            rows = list(ex.map(row, h_scales))
    else:
        rows = [row(s) for s in h_scales]
    return ContinuityTable(rows, base.converged)


def equilibrium_rows(sol):
    header = ["t", "beta_star", "Sigma_vv", "lambda"]
    t = sol.grid.times
    rows = [[t[k], sol.beta_star.values[k], sol.cov_path.vv[k], sol.lambda_path[k]]
            for k in range(len(t))]
    return header, rows
