"""Euler-Maruyama Monte Carlo of the market with a filter-generated price."""

from dataclasses import dataclass

import numpy as np

from .model import TimeGrid, initial_covariance
from .riccati import integrate_riccati

# random channels per path
CH_W, CH_BM, CH_BC, CH_EPS, CH_INIT = range(5)
N_CHANNELS = 5


def _stream(base_seed, index, channel):
    seq = np.random.SeedSequence([int(base_seed) & (2 ** 64 - 1), int(index), int(channel)])
    return np.random.Generator(np.random.Philox(seq))


def _draw(base_seed, indices, n_steps):
    """Standard normals for a batch of paths: (4, B, n_steps) increments and (B, 3) initial."""
    B = len(indices)
    Z = np.empty((4, B, n_steps))
    Z0 = np.empty((B, 3))
    for j, i in enumerate(indices):
        for ch in (CH_W, CH_BM, CH_BC, CH_EPS):
            Z[ch, j] = _stream(base_seed, i, ch).standard_normal(n_steps)
        Z0[j] = _stream(base_seed, i, CH_INIT).standard_normal(3)
    return Z, Z0


def _psd_sqrt(S):
    w, V = np.linalg.eigh(S)
    return V * np.sqrt(np.clip(w, 0.0, None))


def discrete_filter(beta, p, sigma0):
    """Kalman recursion for the Euler-discretised state space.

    x_{k+1} = (I + A dt) x_k + u_k + w_k,  w_k ~ N(0, Q dt)
    y_k     = C_k x_k dt + n_k,            n_k ~ N(0, R dt)

    Returns the prior covariances (n+1, 3, 3) and the update gains (n, 3).
    """
    grid = beta.grid
    dt = grid.dt
    F = np.eye(3) + np.diag([0.0, -p.alpha_m, -p.alpha_c]) * dt
    Q = np.diag([0.0, p.sigma_m ** 2, p.sigma_c ** 2]) * dt
    R = p.obs_var
    S = sigma0.to_matrix()
    covs = np.empty((grid.n_nodes, 3, 3))
    gains = np.empty((grid.n_steps, 3))
    covs[0] = S
    for k in range(grid.n_steps):
        c = np.array([beta.values[k], p.gamma_F, p.gamma_C])
        Sc = S @ c
        s_inn = dt * dt * (c @ Sc) + R * dt
        g = Sc * dt / s_inn
        S = S - np.outer(g, g) * s_inn
        S = F @ S @ F.T + Q
        S = 0.5 * (S + S.T)
        gains[k] = g
        covs[k + 1] = S
    return covs, gains


def _prepare(beta, p, sigma0, cov_path):
    if sigma0 is None:
        sigma0 = initial_covariance(p)
    if cov_path is None:
        cov_path = integrate_riccati(beta, sigma0, p)
    if not cov_path.complete:
        raise ValueError("covariance path has a breakdown")
    if not cov_path.grid.same_as(beta.grid):
        raise ValueError("grid mismatch between covariance path and beta")
    covs, gains = discrete_filter(beta, p, sigma0)
    return cov_path, covs, gains, _psd_sqrt(sigma0.to_matrix())


def _run(Z, Z0, beta, G, root0, p, record, checkpoints=None):
    """Advance a batch of paths.  All paths share the arithmetic, so a batch
    of one reproduces any member of a larger batch exactly."""
    grid = beta.grid
    n, dt = grid.n_steps, grid.dt
    sq = np.sqrt(dt)
    b = beta.values
    B = Z.shape[1]
    x0 = Z0 @ root0.T
    v, m, c = x0[:, 0].copy(), x0[:, 1].copy(), x0[:, 2].copy()
    xv = np.zeros(B)
    xm = np.zeros(B)
    xc = np.zeros(B)
    eps = np.zeros(B)
    Y = np.zeros(B)
    X = np.zeros(B)
    gF, gC = p.gamma_F, p.gamma_C
    am, ac = p.alpha_m, p.alpha_c
    km, kc = p.kappa_m, p.kappa_c
    sm, sc, se, sz = p.sigma_m, p.sigma_c, p.sigma_eps, p.sigma_z
    fold = p.fold_eps_into_R
    rec = None
    if record:
        rec = {k: np.empty((B, n + 1)) for k in ("m", "c", "eps", "Y", "P")}
        rec["theta"] = np.empty((B, n))
        rec["wealth"] = np.empty((B, n))
        for k, arr in (("m", m), ("c", c), ("eps", eps), ("Y", Y), ("P", xv)):
            rec[k][:, 0] = arr
    snap = None
    if checkpoints is not None:
        # values needed at checkpoints k: v-P_k, P_k - P_{k-1}, P_{k-1} - P_{k-2},
        # theta_k and Y_k - Y_{k-1}
        cp = set(int(k) for k in checkpoints)
        need = cp | {k - 1 for k in cp} | {k - 2 for k in cp}
        snap = {"P": {}, "Y": {}, "theta": {}}
        if 0 in need:
            snap["P"][0] = xv.copy()
            snap["Y"][0] = Y.copy()
    for k in range(n):
        theta = b[k] * (v - xv)
        dW = sq * Z[CH_W, :, k]
        dBm = sq * Z[CH_BM, :, k]
        dBc = sq * Z[CH_BC, :, k]
        dE = sq * Z[CH_EPS, :, k]
        if fold:
            dY = theta * dt + (gF * m + gC * c) * dt + se * dE + sz * dW
        else:
            dY = theta * dt + (gF * m + gC * c + se * eps) * dt + sz * dW
        # the state-space observation is the order flow plus beta P dt, since
        # the insider trades against the current price
        innov = dY + b[k] * xv * dt - (b[k] * xv + gF * xm + gC * xc) * dt
        dP = G[k, 0] * innov
        w = theta * (v - xv) * dt
        if snap is not None and k in cp:
            snap["theta"][k] = theta.copy()
        X += w
        xm = (1.0 - am * dt) * (xm + G[k, 1] * innov) + km * dP
        xc = (1.0 - ac * dt) * (xc + G[k, 2] * innov) - kc * dP
        xv = xv + dP
        m = m - am * m * dt + km * dP + sm * dBm
        c = c - ac * c * dt - kc * dP + sc * dBc
        eps = eps + dE
        Y = Y + dY
        if record:
            rec["theta"][:, k] = theta
            rec["wealth"][:, k] = w
            for key, arr in (("m", m), ("c", c), ("eps", eps), ("Y", Y), ("P", xv)):
                rec[key][:, k + 1] = arr
        if snap is not None and (k + 1) in need:
            snap["P"][k + 1] = xv.copy()
            snap["Y"][k + 1] = Y.copy()
    final = {"v": v, "m": m, "c": c, "P": xv, "X": X}
    return final, rec, snap


@dataclass(frozen=True, eq=False)
class PathRecord:
    seed: int
    path_index: int
    grid: TimeGrid
    v: float
    m: np.ndarray
    c: np.ndarray
    eps_state: np.ndarray
    Y: np.ndarray
    P: np.ndarray
    theta: np.ndarray
    wealth_increment: np.ndarray
    X_T: float
    filter_diverged: bool

    def terminal_decomposition(self):
        """X_T as Theta_T (v - P_T) + sum Theta_{k+1} dP_k (summation by parts)."""
        dt = self.grid.dt
        Theta = np.concatenate([[0.0], np.cumsum(self.theta * dt)])
        dP = np.diff(self.P)
        return float(Theta[-1] * (self.v - self.P[-1]) + np.sum(Theta[1:] * dP))


def _diverged(P, p):
    return bool(~np.all(np.isfinite(P)) or np.max(np.abs(P)) > 1e8 * p.sigma_v)


def simulate_path(seed, beta, p, sigma0=None, cov_path=None, path_index=0):
    """Simulate one path; (seed, path_index) key the random streams."""
    _, _, G, root0 = _prepare(beta, p, sigma0, cov_path)
    Z, Z0 = _draw(seed, [path_index], beta.grid.n_steps)
    final, rec, _ = _run(Z, Z0, beta, G, root0, p, record=True)
    return PathRecord(int(seed), int(path_index), beta.grid, float(final["v"][0]),
                      rec["m"][0], rec["c"][0], rec["eps"][0], rec["Y"][0], rec["P"][0],
                      rec["theta"][0], rec["wealth"][0], float(final["X"][0]),
                      _diverged(rec["P"][0], p))


@dataclass(frozen=True, eq=False)
class McSummary:
    n_paths: int
    base_seed: int
    mean_XT: float
    se_XT: float
    analytic_J: float
    discrete_J: float
    checkpoint_times: np.ndarray
    mean_vP: np.ndarray
    se_vP: np.ndarray
    martingale_stat: float
    theta_coef: float
    theta_se: float
    var_m_T: float
    var_m_T_se: float
    var_c_T: float
    var_c_T_se: float
    n_filter_diverged: int

    @property
    def mean_vP_profile(self):
        return list(zip(self.checkpoint_times, self.mean_vP, self.se_vP))

    @property
    def theta_pred_stat(self):
        return self.theta_coef, self.theta_se

    def to_dict(self):
        return {
            "n_paths": self.n_paths, "base_seed": self.base_seed,
            "mean_XT": self.mean_XT, "se_XT": self.se_XT, "analytic_J": self.analytic_J,
            "discrete_J": self.discrete_J,
            "checkpoint_times": self.checkpoint_times.tolist(),
            "mean_vP": self.mean_vP.tolist(), "se_vP": self.se_vP.tolist(),
            "martingale_stat": self.martingale_stat,
            "theta_coef": self.theta_coef, "theta_se": self.theta_se,
            "var_m_T": self.var_m_T, "var_m_T_se": self.var_m_T_se,
            "var_c_T": self.var_c_T, "var_c_T_se": self.var_c_T_se,
            "n_filter_diverged": self.n_filter_diverged,
        }


def _mean_se(x):
    return float(np.mean(x)), float(np.std(x, ddof=1) / np.sqrt(len(x)))


def _var_se(x):
    d2 = (x - np.mean(x)) ** 2
    return _mean_se(d2)


def _lag_corr(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    return float(np.sum(a * b) / den) if den > 0 else 0.0


def _cluster_slope(x, y):
    """Pooled OLS slope of y on x (with intercept) and its path-clustered SE.
    x, y have shape (n_paths, n_obs)."""
    xd = x - x.mean()
    yd = y - y.mean()
    sxx = np.sum(xd * xd)
    if sxx == 0:
        return 0.0, np.inf
    slope = np.sum(xd * yd) / sxx
    resid = yd - slope * xd
    score = np.sum(xd * resid, axis=1)
    G = x.shape[0]
    var = np.sum(score ** 2) / sxx ** 2 * G / (G - 1)
    return float(slope), float(np.sqrt(var))


def checkpoint_indices(grid, n_checkpoints=10):
    n = grid.n_steps
    return np.array([max(2, (j * (n - 1)) // n_checkpoints)
                     for j in range(1, n_checkpoints + 1)])


def monte_carlo(n_paths, base_seed, beta, p, sigma0=None, cov_path=None, n_checkpoints=10,
                batch_size=1000):
    """Independent paths keyed by (base_seed, path index) aggregated into an McSummary."""
    if not (isinstance(n_paths, (int, np.integer)) and n_paths >= 2):
        raise ValueError("n_paths must be an integer >= 2")
    cov_path, covs, G, root0 = _prepare(beta, p, sigma0, cov_path)
    grid = beta.grid
    ks = checkpoint_indices(grid, n_checkpoints)
    X = np.empty(n_paths)
    vP = np.empty((n_paths, len(ks)))
    dP = np.empty((n_paths, len(ks)))
    dP_lag = np.empty((n_paths, len(ks)))
    th = np.empty((n_paths, len(ks)))
    dY_lag = np.empty((n_paths, len(ks)))
    mT = np.empty(n_paths)
    cT = np.empty(n_paths)
    diverged = 0
    for start in range(0, n_paths, batch_size):
        idx = list(range(start, min(n_paths, start + batch_size)))
        Z, Z0 = _draw(base_seed, idx, grid.n_steps)
        final, _, snap = _run(Z, Z0, beta, G, root0, p, record=False, checkpoints=ks)
        sl = slice(idx[0], idx[-1] + 1)
        X[sl] = final["X"]
        mT[sl] = final["m"]
        cT[sl] = final["c"]
        P, Y = snap["P"], snap["Y"]
        for j, k in enumerate(ks):
            vP[sl, j] = final["v"] - P[k]
            dP[sl, j] = P[k] - P[k - 1]
            dP_lag[sl, j] = P[k - 1] - P[k - 2]
            th[sl, j] = snap["theta"][k] * grid.dt
            dY_lag[sl, j] = Y[k] - Y[k - 1]
        Pend = final["P"]
        diverged += int(np.sum(~np.isfinite(Pend) | (np.abs(Pend) > 1e8 * p.sigma_v)))
    mean_X, se_X = _mean_se(X)
    J = float(np.trapezoid(beta.values * cov_path.vv, dx=grid.dt))
    J_discrete = float(np.sum(beta.values[:-1] * covs[:-1, 0, 0]) * grid.dt)
    mv = np.mean(vP, axis=0)
    sv = np.std(vP, axis=0, ddof=1) / np.sqrt(n_paths)
    mart = max(abs(_lag_corr(dP[:, j], dP_lag[:, j])) for j in range(len(ks))) * np.sqrt(n_paths)
    coef, se = _cluster_slope(dY_lag, th)
    vm, vm_se = _var_se(mT)
    vc, vc_se = _var_se(cT)
    return McSummary(int(n_paths), int(base_seed), mean_X, se_X, J, J_discrete,
                     grid.times[ks], mv, sv, float(mart), coef, se, vm, vm_se, vc, vc_se,
                     diverged)
