"""Model primitives: parameters, time grid, covariance storage and intensity paths."""

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np


class ParameterError(ValueError):
    """Raised when model parameters or a config file are invalid."""


# storage order of the six independent covariance entries
ENTRY_NAMES = ("vv", "vm", "vc", "mm", "mc", "cc")
_SYM_INDEX = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


@dataclass(frozen=True)
class ModelParams:
    sigma_v: float = 1.0
    sigma_z: float = 1.0
    sigma_m: float = 0.0
    sigma_c: float = 0.0
    sigma_eps: float = 0.0
    alpha_m: float = 1.0
    alpha_c: float = 1.0
    kappa_m: float = 0.0
    kappa_c: float = 0.0
    gamma_F: float = 0.0
    gamma_C: float = 0.0
    T: float = 1.0
    var_m0: float = 0.0
    var_c0: float = 0.0
    fold_eps_into_R: bool = True

    @property
    def obs_var(self):
        """Observation noise variance R used by the filter."""
        if self.fold_eps_into_R:
            return self.sigma_z ** 2 + self.sigma_eps ** 2
        return self.sigma_z ** 2

    @property
    def H(self):
        return self.gamma_F ** 2 + self.gamma_C ** 2

    def feedback(self):
        return FeedbackVector(self.kappa_m, self.kappa_c, self.gamma_F,
                              self.gamma_C, self.sigma_eps)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def scaled_feedback(self, s, base=None):
        """Return params with the feedback vector set to s times `base` (default: own h)."""
        h = self.feedback() if base is None else base
        return self.replace(kappa_m=s * h.kappa_m, kappa_c=s * h.kappa_c,
                            gamma_F=s * h.gamma_F, gamma_C=s * h.gamma_C,
                            sigma_eps=s * h.sigma_eps)

    def params_array(self):
        """Tuple (gF, gC, am, ac, qm, qc, R) consumed by the numerical kernels."""
        return (float(self.gamma_F), float(self.gamma_C), float(self.alpha_m),
                float(self.alpha_c), float(self.sigma_m ** 2),
                float(self.sigma_c ** 2), float(self.obs_var))

    def divergence_threshold(self):
        return 1e12 * (self.sigma_v ** 2 + self.sigma_m ** 2 + self.sigma_c ** 2 + 1.0)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class FeedbackVector:
    kappa_m: float = 0.0
    kappa_c: float = 0.0
    gamma_F: float = 0.0
    gamma_C: float = 0.0
    sigma_eps: float = 0.0

    def as_array(self):
        return np.array([self.kappa_m, self.kappa_c, self.gamma_F,
                         self.gamma_C, self.sigma_eps])

    @property
    def norm(self):
        return float(np.linalg.norm(self.as_array()))


_POSITIVE = ("sigma_v", "sigma_z", "T", "alpha_m", "alpha_c")
_NONNEGATIVE = ("kappa_m", "kappa_c", "var_m0", "var_c0", "sigma_eps",
                "sigma_m", "sigma_c")


def validate_params(p):
    """Check parameter invariants and return p unchanged."""
    for f in dataclasses.fields(p):
        val = getattr(p, f.name)
        if f.name == "fold_eps_into_R":
            if not isinstance(val, bool):
                raise ParameterError("fold_eps_into_R must be a boolean")
            continue
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ParameterError(f"{f.name} must be a number")
        if not math.isfinite(val):
            raise ParameterError(f"{f.name} must be finite")
    for name in _POSITIVE:
        if not getattr(p, name) > 0:
            raise ParameterError(f"{name} must be positive")
    for name in _NONNEGATIVE:
        if getattr(p, name) < 0:
            raise ParameterError(f"{name} must be nonnegative")
    return p


def drift_matrix(p):
    return np.diag([0.0, -p.alpha_m, -p.alpha_c])


def state_noise_cov(p):
    return np.diag([0.0, p.sigma_m ** 2, p.sigma_c ** 2])


@dataclass(frozen=True)
class StateVec:
    v: float
    m: float
    c: float

    def as_array(self):
        return np.array([self.v, self.m, self.c])


@dataclass(frozen=True)
class MeasurementVec:
    beta: float
    gamma_F: float
    gamma_C: float

    def as_array(self):
        return np.array([self.beta, self.gamma_F, self.gamma_C])


def measurement_vec(beta_t, p):
    if not math.isfinite(beta_t):
        raise ValueError("beta_t must be finite")
    return MeasurementVec(float(beta_t), float(p.gamma_F), float(p.gamma_C))


@dataclass(frozen=True)
class CovMatrix:
    """Symmetric 3x3 covariance over (v, m, c), stored as its six upper entries."""
    vv: float
    vm: float
    vc: float
    mm: float
    mc: float
    cc: float

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=float)
        if a.shape != (6,):
            raise ValueError("expected six covariance entries")
        return cls(*(float(x) for x in a))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        if m.shape != (3, 3):
            raise ValueError("expected a 3x3 matrix")
        return cls(*(float(m[i, j]) for i, j in _SYM_INDEX))

    @classmethod
    def diag(cls, vv, mm, cc):
        return cls(vv, 0.0, 0.0, mm, 0.0, cc)

    def as_array(self):
        return np.array([self.vv, self.vm, self.vc, self.mm, self.mc, self.cc])

    def to_matrix(self):
        return entries_to_matrix(self.as_array())

    @property
    def trace(self):
        return self.vv + self.mm + self.cc

    def min_eigenvalue(self):
        from .linalg import sym3_eigvals
        return sym3_eigvals(self.as_array())[0]

    def is_psd(self, rel_tol=1e-10):
        return self.min_eigenvalue() >= -rel_tol * abs(self.trace)


def entries_to_matrix(e):
    """Expand stored entries (..., 6) into symmetric matrices (..., 3, 3)."""
    e = np.asarray(e, dtype=float)
    out = np.empty(e.shape[:-1] + (3, 3))
    for k, (i, j) in enumerate(_SYM_INDEX):
        out[..., i, j] = e[..., k]
        out[..., j, i] = e[..., k]
    return out


def matrix_to_entries(m):
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., i, j] for i, j in _SYM_INDEX], axis=-1)


def initial_covariance(p, override=None):
    """Sigma_0 = diag(sigma_v^2, var_m0, var_c0), or the six given override entries."""
    if override is not None:
        s0 = CovMatrix.from_array(override)
        if not np.all(np.isfinite(s0.as_array())):
            raise ParameterError("sigma0_override must be finite")
        if not s0.is_psd():
            raise ParameterError("sigma0_override must be positive semidefinite")
        return s0
    return CovMatrix.diag(p.sigma_v ** 2, p.var_m0, p.var_c0)


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not (isinstance(self.n_steps, (int, np.integer)) and self.n_steps > 0):
            raise ValueError("n_steps must be a positive integer")
        if not self.T > 0:
            raise ValueError("T must be positive")

    @property
    def dt(self):
        return self.T / self.n_steps

    @property
    def times(self):
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def n_nodes(self):
        return self.n_steps + 1

    def truncated(self, n_cut=10):
        """Grid on [0, T - n_cut*dt] with the same spacing."""
        if not 0 <= n_cut < self.n_steps:
            raise ValueError("n_cut must lie in [0, n_steps)")
        k = self.n_steps - n_cut
        return TimeGrid(k * self.dt, k)

    def same_as(self, other):
        return self.n_steps == other.n_steps and abs(self.dt - other.dt) <= 1e-15 * self.dt


def midpoint_values(b):
    """Cubic four-point interpolation of nodal values at interval midpoints.

    Where the stencil is strictly positive the reciprocal is interpolated
    instead, which is exact for intensities of the form c/(T - t).
    """
    b = np.asarray(b, dtype=float)
    n = len(b) - 1
    if n < 3:
        return 0.5 * (b[:-1] + b[1:])

    def cubic(x):
        m = np.empty(n)
        m[1:n - 1] = (-x[0:n - 2] + 9 * x[1:n - 1] + 9 * x[2:n] - x[3:n + 1]) / 16
        m[0] = (5 * x[0] + 15 * x[1] - 5 * x[2] + x[3]) / 16
        m[n - 1] = (x[n - 3] - 5 * x[n - 2] + 15 * x[n - 1] + 5 * x[n]) / 16
        return m

    plain = cubic(b)
    pos = b > 0
    if not pos.any():
        return plain
    with np.errstate(divide="ignore"):
        recip = cubic(np.where(pos, 1.0 / np.where(pos, b, 1.0), 1.0))
    # stencil positivity per interval
    ok = np.empty(n, dtype=bool)
    ok[1:n - 1] = pos[0:n - 2] & pos[1:n - 1] & pos[2:n] & pos[3:n + 1]
    ok[0] = pos[0:4].all()
    ok[n - 1] = pos[n - 3:n + 1].all()
    ok &= recip > 0
    out = plain.copy()
    out[ok] = 1.0 / recip[ok]
    return out


@dataclass(frozen=True, eq=False)
class IntensityPath:
    """Deterministic trading intensity beta on a time grid.

    `mid_values` optionally holds beta at interval midpoints; when absent the
    integrators interpolate them from the nodes.
    """
    grid: TimeGrid
    values: np.ndarray
    mid_values: np.ndarray = field(default=None)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_nodes,):
            raise ValueError("values must have one entry per grid node")
        object.__setattr__(self, "values", v)
        if self.mid_values is not None:
            mv = np.asarray(self.mid_values, dtype=float)
            if mv.shape != (self.grid.n_steps,):
                raise ValueError("mid_values must have one entry per interval")
            object.__setattr__(self, "mid_values", mv)

    @classmethod
    def from_function(cls, grid, fn):
        t = grid.times
        return cls(grid, np.asarray(fn(t), dtype=float),
                   np.asarray(fn(t[:-1] + 0.5 * grid.dt), dtype=float))

    @classmethod
    def constant(cls, grid, value):
        return cls(grid, np.full(grid.n_nodes, float(value)),
                   np.full(grid.n_steps, float(value)))

    def midpoints(self):
        if self.mid_values is not None:
            return self.mid_values
        return midpoint_values(self.values)

    def nodal(self):
        """Copy without stored midpoints."""
        return IntensityPath(self.grid, self.values.copy())

    def l2_norm(self):
        return l2_norm(self.values, self.grid.dt)


def l2_norm(x, dt):
    """Discrete L2 norm sqrt(sum x^2 dt)."""
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.sum(x * x) * dt))


def classical_intensity(grid, p, sigma_vv0=None, horizon=None):
    """Kyle intensity sqrt(R T / S0) / (T - t) for the given horizon."""
    s0 = p.sigma_v ** 2 if sigma_vv0 is None else sigma_vv0
    T = p.T if horizon is None else horizon
    c = math.sqrt(p.obs_var * T / s0)
    return IntensityPath.from_function(grid, lambda t: c / (T - t))


@dataclass(frozen=True)
class ModelConfig:
    """Parsed config file: model params plus numerical settings."""
    params: ModelParams
    n_steps: int = 1000
    psd_tol: float = 1e-10
    sigma0_override: tuple = None

    def grid(self):
        return TimeGrid(self.params.T, self.n_steps)

    def sigma0(self):
        return initial_covariance(self.params, self.sigma0_override)

    def to_dict(self):
        d = self.params.to_dict()
        d["n_steps"] = self.n_steps
        d["psd_tol"] = self.psd_tol
        d["sigma0_override"] = (None if self.sigma0_override is None
                                else list(self.sigma0_override))
        return d


_PARAM_FIELDS = {f.name for f in dataclasses.fields(ModelParams)}
_CONFIG_FIELDS = _PARAM_FIELDS | {"n_steps", "psd_tol", "sigma0_override"}


def config_from_dict(d):
    if not isinstance(d, dict):
        raise ParameterError("config must be a JSON object")
    unknown = sorted(set(d) - _CONFIG_FIELDS)
    if unknown:
        raise ParameterError(f"unknown config keys: {', '.join(unknown)}")
    kw = {}
    for k in _PARAM_FIELDS & set(d):
        v = d[k]
        if k != "fold_eps_into_R" and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        kw[k] = v
    params = validate_params(ModelParams(**kw))
    n_steps = d.get("n_steps", 1000)
    if isinstance(n_steps, bool) or not isinstance(n_steps, int) or n_steps < 20:
        raise ParameterError("n_steps must be an integer >= 20")
    psd_tol = d.get("psd_tol", 1e-10)
    if isinstance(psd_tol, bool) or not isinstance(psd_tol, (int, float)) or not psd_tol >= 0:
        raise ParameterError("psd_tol must be a nonnegative number")
    override = d.get("sigma0_override")
    if override is not None:
        if not isinstance(override, list) or len(override) != 6:
            raise ParameterError("sigma0_override must be a list of six numbers")
        override = tuple(float(x) for x in override)
        initial_covariance(params, override)
    return ModelConfig(params, n_steps, float(psd_tol), override)


def load_config(path):
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise ParameterError(f"config file not found: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ParameterError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(d)
