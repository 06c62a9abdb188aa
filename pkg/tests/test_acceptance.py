"""Acceptance criteria 1-12, each at its stated tolerance.

A PASS/FAIL line per criterion is printed in the terminal summary (see conftest).
"""

import json
import time

import numpy as np
import pytest

from kyle_feedback.cli import main
from kyle_feedback.equilibrium import (continuity_check, contraction_probe,
                                       estimate_lipschitz, solve_pontryagin)
from kyle_feedback.filtering import lambda_sup
from kyle_feedback.model import (CovMatrix, IntensityPath, ModelParams, TimeGrid,
                                 classical_intensity)
from kyle_feedback.perturbation import integrate_sensitivity
from kyle_feedback.riccati import integrate_riccati, riccati_rhs, scan_blowup
from kyle_feedback.simulator import monte_carlo
from kyle_feedback.stability import dc_gains, stability_report

MC_SEED = 7  # fixed before any run


def detail(request, text):
    request.node.user_properties.append(("detail", text))


def matrix_rhs(S, beta, p):
    A = np.diag([0.0, -p.alpha_m, -p.alpha_c])
    Q = np.diag([0.0, p.sigma_m ** 2, p.sigma_c ** 2])
    C = np.array([[beta, p.gamma_F, p.gamma_C]])
    return A @ S + S @ A.T + Q - S @ C.T @ C @ S / p.obs_var


def test_ac01_classical_recovery(request):
    t0 = time.perf_counter()
    sol = solve_pontryagin(ModelParams(), tol=1e-10, n_steps=1000)
    elapsed = time.perf_counter() - t0
    t = sol.grid.times
    assert sol.grid.T == pytest.approx(1.0 - 10 * 1e-3)
    rel = np.max(np.abs(sol.cov_path.vv - (1 - t)) / (1 - t))
    dJ = abs(sol.profit_J - 1.0)
    detail(request, f"max rel err Svv {rel:.2e}, |J-1| {dJ:.2e}, {elapsed:.2f}s")
    assert sol.converged
    assert rel <= 1e-3
    assert dJ <= 1e-3
    assert elapsed < 30


def test_ac02_riccati_oracle(request):
    rng = np.random.default_rng(2)
    riccati_rhs(CovMatrix.diag(1, 0, 0), 1.0, ModelParams())  # compile outside the timer
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        a = rng.standard_normal((3, 3))
        S = a @ a.T
        p = ModelParams(sigma_m=rng.uniform(0, 1), sigma_c=rng.uniform(0, 1),
                        alpha_m=rng.uniform(0.1, 3), alpha_c=rng.uniform(0.1, 3),
                        gamma_F=rng.normal(), gamma_C=rng.normal(),
                        sigma_z=rng.uniform(0.2, 2), sigma_eps=rng.uniform(0, 1))
        beta = rng.uniform(0, 5)
        got = riccati_rhs(CovMatrix.from_matrix(S), beta, p).to_matrix()
        ref = matrix_rhs(S, beta, p)
        worst = max(worst, np.max(np.abs(got - ref)) / np.max(np.abs(ref)))
    elapsed = time.perf_counter() - t0
    detail(request, f"max rel diff {worst:.2e}, {elapsed:.2f}s")
    assert worst <= 1e-12
    assert elapsed < 1.0


def _psd_fixtures():
    rng = np.random.default_rng(3)
    out = []
    for i in range(10):
        p = ModelParams(sigma_v=rng.uniform(0.5, 2), sigma_z=rng.uniform(0.5, 2),
                        sigma_m=rng.uniform(0, 0.5), sigma_c=rng.uniform(0, 0.5),
                        alpha_m=rng.uniform(0.5, 3), alpha_c=rng.uniform(0.5, 3),
                        kappa_m=rng.uniform(0, 0.3), kappa_c=rng.uniform(0, 0.3),
                        gamma_F=rng.uniform(-0.3, 0.3), gamma_C=rng.uniform(-0.3, 0.3),
                        T=rng.uniform(0.5, 2))
        a = 0.3 * rng.standard_normal((3, 3))
        S0 = np.diag([p.sigma_v ** 2, 0.2, 0.2]) + a @ a.T
        grid = TimeGrid(p.T, 1000)
        b0, b1 = rng.uniform(0.5, 3, 2)
        beta = IntensityPath.from_function(
            grid, lambda t, b0=b0, b1=b1, T=p.T: b0 + b1 * np.sin(2 * np.pi * t / T) ** 2)
        out.append((p, CovMatrix.from_matrix(S0), beta))
    return out


def test_ac03_well_posedness_monitors(request):
    worst = np.inf
    for p, s0, beta in _psd_fixtures():
        path = integrate_riccati(beta, s0, p)
        assert path.complete
        rep = stability_report(*dc_gains(path, beta, p), p)
        assert rep.spectral_ok
        tr = path.entries[:, 0] + path.entries[:, 3] + path.entries[:, 5]
        ratio = path.psd_min / tr
        worst = min(worst, np.min(ratio))
        assert np.all(path.psd_min >= -1e-10 * tr)
    detail(request, f"min over fixtures of min-eig/trace {worst:.3g}")


def test_ac04_tangent_linear(request):
    p = ModelParams(sigma_m=0.2, sigma_c=0.1)
    corr = CovMatrix.from_array([1.0, 0.2, 0.0, 0.1, 0.0, 0.1])
    diag = CovMatrix.diag(1.0, 0.1, 0.1)
    gaps, diag_max, neg = [], None, None
    for s0 in (corr, diag):
        sol = solve_pontryagin(p, tol=1e-10, sigma0=s0, n_steps=1000)
        beta = sol.beta_star
        sens = integrate_sensitivity(sol.cov_path, beta, p)
        eps = 1e-4
        up = integrate_riccati(beta, s0, p.replace(gamma_F=eps)).entries
        dn = integrate_riccati(beta, s0, p.replace(gamma_F=-eps)).entries
        gaps.append(np.max(np.abs(sens.entries - (up - dn) / (2 * eps))))
        if s0 is diag:
            diag_max = np.max(np.abs(sens.dvv))
        else:
            neg = bool(np.all(sens.dvv[1:] < 0))
    detail(request, f"max FD gap {max(gaps):.2e}, diagonal |dvv| {diag_max:.1e}, "
                    f"correlated dvv<0: {neg}")
    assert max(gaps) <= 1e-4
    assert diag_max <= 1e-10
    assert neg


@pytest.fixture(scope="module")
def mc_run(classical_solution, classical_params):
    t0 = time.perf_counter()
    mc = monte_carlo(10_000, MC_SEED, classical_solution.beta_star, classical_params,
                     cov_path=classical_solution.cov_path)
    return mc, time.perf_counter() - t0


def test_ac05_mc_profit_identity(request, mc_run, classical_solution):
    mc, elapsed = mc_run
    assert classical_solution.grid.dt == pytest.approx(1e-3)
    z = (mc.mean_XT - mc.analytic_J) / mc.se_XT
    detail(request, f"mean X_T {mc.mean_XT:.5f} vs {mc.analytic_J:.5f}, "
                    f"z = {z:+.2f}, {elapsed:.1f}s")
    assert mc.n_paths == 10_000
    assert abs(z) <= 3
    assert elapsed < 120


def test_ac06_rational_pricing_inconspicuous(request, mc_run):
    mc, _ = mc_run
    zs = mc.mean_vP / mc.se_vP
    zt = mc.theta_coef / mc.theta_se
    detail(request, f"max |z| of v-P over {len(zs)} checkpoints {np.max(np.abs(zs)):.2f}, "
                    f"theta regression z = {zt:+.2f}")
    assert len(zs) == 10
    assert np.all(np.abs(zs) <= 3)
    assert abs(zt) <= 3


def test_ac07_stability_algebra(request):
    p = ModelParams(kappa_m=0.2, kappa_c=0.1)
    rep = stability_report(0.5, -0.3, p)
    norm1 = max(abs(0.5) * (0.2 + 0.1), abs(-0.3) * (0.2 + 0.1))
    assert abs(rep.rho_F - 0.13) <= 1e-12
    assert abs(rep.norm_inf - 0.16) <= 1e-12
    assert abs(rep.norm_1 - norm1) <= 1e-12
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        km, kc = rng.uniform(0, 2, 2)
        Gm, Gc = rng.uniform(-3, 3, 2)
        r = stability_report(Gm, Gc, ModelParams(kappa_m=km, kappa_c=kc))
        worst = max(worst, abs(r.rho_F - abs(km * Gm - kc * Gc)))
    detail(request, f"rho {rep.rho_F:.15g}, inf-norm {rep.norm_inf:.15g}, "
                    f"1-norm {rep.norm_1:.15g}, rank-1 max err {worst:.1e}")
    assert worst <= 1e-12


def test_ac08_filter_exponent(request):
    p = ModelParams()
    grid = TimeGrid(1.0, 1000).truncated(10)
    beta = classical_intensity(grid, p)
    path = integrate_riccati(beta, CovMatrix.diag(1, 0, 0), p)
    rep = lambda_sup(path, beta, p)
    expected = max(-1.0 / p.T, -p.alpha_m, -p.alpha_c)
    detail(request, f"Lambda {rep.Lambda:.10f} vs {expected}")
    assert abs(rep.Lambda - expected) <= 1e-6


def test_ac09_breakdown_scan(request):
    p = ModelParams(sigma_m=0.2, sigma_c=0.1)
    grid = TimeGrid(1.0, 1000).truncated(10)
    beta = classical_intensity(grid, p)
    s0 = CovMatrix.diag(1.0, 0.1, 0.1)
    t0 = time.perf_counter()
    res = scan_blowup(p, beta, np.geomspace(1.0, 1e6, 25), sigma0=s0, direction=(1.0, 0.3))
    elapsed = time.perf_counter() - t0
    assert res.found
    lo, hi = res.bracket
    detail(request, f"H* ~ {res.H_star_estimate:.6g} in [{lo:.6g}, {hi:.6g}], "
                    f"{elapsed:.2f}s")
    assert (hi - lo) / hi <= 1e-3
    for r in res.records + res.refinement:
        if r.H <= lo:
            assert r.completed
        if r.H >= hi:
            assert not r.completed
            assert r.mode in ("psd_loss", "divergence") and r.time < p.T
    assert res.monotone
    assert elapsed < 120


def test_ac10_contraction_probe(request):
    grid = TimeGrid(1.0, 1000)
    L = estimate_lipschitz(IntensityPath.constant(grid, 0.5), ModelParams(), n_probes=8,
                           frozen_sigma_vv=2.0)
    p = ModelParams(sigma_m=0.2, sigma_c=0.1, gamma_F=1.0, gamma_C=0.5)
    tg = grid.truncated(10)
    probe = contraction_probe(p, [0.0, 0.25, 0.5, 1.0, 2.0, 4.0],
                              classical_intensity(tg, p), n_probes=4,
                              sigma0=CovMatrix.diag(1.0, 0.1, 0.1))
    above = np.nonzero(probe.L_estimates > 1)[0]
    expected = float(probe.h_values[above[0]]) if len(above) else None
    detail(request, f"frozen L {L:.6f}; L(h) {np.round(probe.L_estimates, 3).tolist()}, "
                    f"crossing {probe.crossing}")
    assert abs(L - 1.0) <= 1e-3
    assert len(probe.L_estimates) == 6 and np.all(np.isfinite(probe.L_estimates))
    assert probe.crossing == expected


def test_ac11_first_order_continuity(request):
    p = ModelParams(sigma_m=0.2, sigma_c=0.1, gamma_F=1.0, kappa_m=0.2, kappa_c=0.1)
    s0 = CovMatrix.from_array([1.0, 0.2, 0.0, 0.1, 0.0, 0.1])
    table = continuity_check(p, [0.1, 0.05, 0.025], sigma0=s0, n_steps=1000, tol=1e-10)
    ratios = table.ratios
    detail(request, f"deviations {np.array2string(table.deviations, precision=4)}, "
                    f"ratios {np.array2string(ratios, precision=4)}")
    assert table.baseline_converged and all(r.converged for r in table.rows)
    assert table.decreasing
    assert np.all((ratios >= 0.3) & (ratios <= 0.7))


def test_ac12_determinism(request, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"sigma_m": 0.2, "sigma_c": 0.1, "gamma_F": 0.1,
                               "kappa_m": 0.2, "kappa_c": 0.1, "n_steps": 200,
                               "sigma0_override": [1, 0.2, 0, 0.1, 0, 0.1]}))
    commands = {
        "equilibrium": [],
        "sweep": ["--s-max", "1", "--n-points", "3", "--n-probes", "2", "--threads", "2"],
        "simulate": ["--n-paths", "200", "--seed", "5", "--export-paths", "1"],
        "stability": [],
        "sensitivity": ["--statics-eps", "1e-3"],
        "riccati": [],
        "breakdown": ["--H-points", "7", "--threads", "2"],
    }
    n_files = 0
    for name, extra in commands.items():
        outs = []
        for run in ("a", "b"):
            out = tmp_path / run / name
            assert main([name, "--config", str(cfg), "--out", str(out)] + extra) == 0
            outs.append(out)
        files = sorted(f.name for f in outs[0].iterdir())
        assert files == sorted(f.name for f in outs[1].iterdir())
        for f in files:
            assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f"{name}/{f}"
            n_files += 1
    detail(request, f"{n_files} files byte-identical across 7 commands")
