import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kyle_feedback.model import CovMatrix, ModelParams, TimeGrid, classical_intensity
from kyle_feedback.riccati import integrate_riccati
from kyle_feedback.stability import (NoStationaryGain, check_stability, dc_gains,
                                     feedback_matrix, stability_report)

FIX = ModelParams(kappa_m=0.2, kappa_c=0.1)


def induced_norm_bruteforce(F, q, n=200_001):
    """max ||F x||_q over the unit sphere of the same norm, by an angular sweep."""
    th = np.linspace(0, 2 * np.pi, n)
    if q == np.inf:
        # unit inf-sphere is traced by the square's boundary
        x = np.stack([np.clip(np.sqrt(2) * np.cos(th), -1, 1),
                      np.clip(np.sqrt(2) * np.sin(th), -1, 1)])
    else:
        x = np.stack([np.cos(th), np.sin(th)])
        x = x / np.sum(np.abs(x), axis=0)
    y = F @ x
    return np.max(np.linalg.norm(y, ord=q, axis=0) / np.linalg.norm(x, ord=q, axis=0))


def test_feedback_matrix_fixture():
    F = feedback_matrix(0.5, -0.3, FIX)
    assert np.allclose(F, [[0.1, -0.06], [-0.05, 0.03]], rtol=0, atol=1e-16)
    assert np.linalg.matrix_rank(F) <= 1


def test_stability_fixture():
    rep = stability_report(0.5, -0.3, FIX)
    assert rep.rho_F == pytest.approx(0.13, abs=1e-12)
    assert rep.norm_inf == pytest.approx(0.16, abs=1e-12)
    assert rep.norm_1 == pytest.approx(0.15, abs=1e-12)
    assert rep.spectral_ok and rep.norm_inf_ok and rep.norm_1_ok and rep.hurwitz


def test_zero_feedback():
    p = ModelParams(alpha_m=0.5, alpha_c=2.0)
    rep = stability_report(0.0, 0.0, p)
    assert rep.rho_F == 0.0
    assert np.array_equal(rep.A_eff, np.diag([-0.5, -2.0]))
    assert rep.hurwitz


def test_norm_formulas_match_bruteforce(rng):
    for _ in range(10):
        km, kc = rng.uniform(0, 1, 2)
        Gm, Gc = rng.uniform(-2, 2, 2)
        rep = stability_report(Gm, Gc, ModelParams(kappa_m=km, kappa_c=kc))
        assert rep.norm_inf == pytest.approx(max(km, kc) * (abs(Gm) + abs(Gc)), abs=1e-14)
        assert rep.norm_1 == pytest.approx(max(abs(Gm), abs(Gc)) * (km + kc), abs=1e-14)
        assert rep.norm_inf == pytest.approx(induced_norm_bruteforce(rep.F, np.inf), abs=1e-6)
        assert rep.norm_1 == pytest.approx(induced_norm_bruteforce(rep.F, 1), abs=1e-6)


def test_random_fixtures_rank_one_and_ordering(rng):
    for _ in range(1000):
        km, kc = rng.uniform(0, 2, 2)
        Gm, Gc = rng.uniform(-3, 3, 2)
        p = ModelParams(kappa_m=km, kappa_c=kc, alpha_m=rng.uniform(0.1, 3),
                        alpha_c=rng.uniform(0.1, 3))
        rep = stability_report(Gm, Gc, p)
        assert abs(rep.rho_F - abs(km * Gm - kc * Gc)) <= 1e-12
        assert rep.rho_F <= min(rep.norm_inf, rep.norm_1) + 1e-12
        if rep.norm_inf_ok:
            assert rep.spectral_ok
        ev = np.linalg.eigvals(rep.A_eff)
        assert max(ev.real) == pytest.approx(rep.eig_A_eff[0].real, abs=1e-12)


def test_spectral_bound_gives_hurwitz_for_equal_rates(rng):
    for _ in range(1000):
        a = rng.uniform(0.1, 3)
        p = ModelParams(kappa_m=rng.uniform(0, 2), kappa_c=rng.uniform(0, 2),
                        alpha_m=a, alpha_c=a)
        rep = stability_report(*rng.uniform(-3, 3, 2), p)
        if rep.spectral_ok:
            assert rep.hurwitz


def test_spectral_bound_without_hurwitz():
    # unequal mean reversion: rho(F) < min alpha while A_eff has a positive eigenvalue
    p = ModelParams(alpha_m=1.0, alpha_c=10.0, kappa_m=1.0, kappa_c=1.0)
    rep = stability_report(100.5, 100.0, p)
    assert rep.spectral_ok
    assert not rep.hurwitz
    assert max(np.linalg.eigvals(rep.A_eff).real) > 0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_rank_one_property(km, kc, Gm, Gc):
    rep = check_stability(feedback_matrix(Gm, Gc, ModelParams(kappa_m=km, kappa_c=kc)),
                          ModelParams(kappa_m=km, kappa_c=kc))
    assert abs(rep.rho_F - abs(km * Gm - kc * Gc)) <= 1e-12 * max(1.0, rep.norm_inf)


def _baseline(p, s0):
    grid = TimeGrid(p.T, 1000).truncated(10)
    beta = classical_intensity(grid, p, s0.vv)
    return integrate_riccati(beta, s0, p), beta


def test_dc_gains_zero_without_exposure():
    p = ModelParams(sigma_m=0.2, sigma_c=0.1, kappa_m=0.3)
    path, beta = _baseline(p, CovMatrix.diag(1, 0.1, 0.1))
    assert dc_gains(path, beta, p) == (0.0, 0.0)


def test_dc_gains_linear_in_exposure():
    p = ModelParams(sigma_m=0.2, sigma_c=0.1, gamma_F=0.1, gamma_C=-0.05)
    path, beta = _baseline(p, CovMatrix.diag(1, 0.1, 0.1))
    Gm, Gc = dc_gains(path, beta, p)
    q = p.replace(gamma_F=0.3, gamma_C=-0.15)
    # same frozen filter, exposures scaled by 3: the gain (the part multiplying
    # gamma) comes from the averaged filter computed at p
    g = Gm / p.gamma_F
    assert Gc == pytest.approx(p.gamma_C * g, rel=1e-14)
    assert q.gamma_F * g == pytest.approx(3 * Gm, rel=1e-14)


def test_dc_gain_matches_time_stepping():
    """Steady state of xhat' = M xhat + K u for a unit step input u."""
    p = ModelParams(sigma_m=0.2, sigma_c=0.1, gamma_F=0.2, gamma_C=0.1, alpha_c=2.0)
    s0 = CovMatrix(1.0, 0.1, 0.0, 0.2, 0.0, 0.1)
    path, beta = _baseline(p, s0)
    Gm, _ = dc_gains(path, beta, p)
    S = path.matrices()
    C = np.stack([beta.values, np.full_like(beta.values, p.gamma_F),
                  np.full_like(beta.values, p.gamma_C)], axis=1)
    K = np.einsum("kij,kj->ki", S, C) / p.obs_var
    M = np.diag([0.0, -p.alpha_m, -p.alpha_c]) - np.einsum("ki,kj->kij", K, C)
    Mb, Kb = M.mean(axis=0), K.mean(axis=0)
    x = np.zeros(3)
    dt = 1e-3
    for _ in range(60_000):
        k1 = Mb @ x + Kb
        k2 = Mb @ (x + 0.5 * dt * k1) + Kb
        k3 = Mb @ (x + 0.5 * dt * k2) + Kb
        k4 = Mb @ (x + dt * k3) + Kb
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    assert Gm == pytest.approx(p.gamma_F * x[0], rel=1e-8)


def test_terminal_window_and_errors():
    p = ModelParams(sigma_m=0.2, sigma_c=0.1, gamma_F=0.2)
    path, beta = _baseline(p, CovMatrix.diag(1, 0.1, 0.1))
    Gm_mean, _ = dc_gains(path, beta, p, window="mean")
    Gm_term, _ = dc_gains(path, beta, p, window="terminal")
    assert np.isfinite(Gm_term) and Gm_term != Gm_mean
    with pytest.raises(ValueError):
        dc_gains(path, beta, p, window="median")


def test_no_stationary_gain():
    # without trading the averaged filter keeps the zero eigenvalue of the static v
    from kyle_feedback.model import IntensityPath
    p = ModelParams(gamma_F=0.2)
    grid = TimeGrid(1.0, 100)
    beta = IntensityPath.constant(grid, 0.0)
    path = integrate_riccati(beta, CovMatrix.diag(1, 0, 0), p)
    with pytest.raises(NoStationaryGain, match="no stationary gain"):
        dc_gains(path, beta, p)
