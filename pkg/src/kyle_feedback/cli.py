"""Command-line front end.

Exit codes: 0 success, 1 input or IO error, 2 numerical non-convergence.
"""

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .equilibrium import (SolverBreakdown, equilibrium_rows, estimate_lipschitz,
                          solve_pontryagin, MapEvaluationError, DegenerateImpactError)
from .filtering import gain_path, gain_path_rows, lambda_sup
from .io import ensure_dir, write_csv, write_json
from .model import ParameterError, classical_intensity, l2_norm, load_config
from .perturbation import comparative_statics, integrate_sensitivity, sensitivity_rows
from .riccati import cov_path_rows, integrate_riccati, scan_blowup
from .simulator import monte_carlo, simulate_path
from .stability import NoStationaryGain, dc_gains, stability_report

EXIT_OK, EXIT_INPUT, EXIT_NONCONV = 0, 1, 2


class InputError(Exception):
    pass


def _impact_variant(args):
    return "literal" if args.paper_literal_lambda else "canonical"


def _solve(cfg, args, p=None, tol=None, max_iters=None):
    p = cfg.params if p is None else p
    return solve_pontryagin(p, tol=tol or args.tol, sigma0=cfg.sigma0(), n_steps=cfg.n_steps,
                            max_iters=max_iters or args.max_iters, psd_tol=cfg.psd_tol,
                            impact_variant=_impact_variant(args))


def cmd_equilibrium(cfg, args, out):
    sol = _solve(cfg, args)
    write_csv(os.path.join(out, "equilibrium.csv"), *equilibrium_rows(sol))
    write_json(os.path.join(out, "equilibrium.json"), sol.summary())
    print(f"J = {sol.profit_J:.10g}  converged = {sol.converged}  ({sol.message})")
    return EXIT_OK if sol.converged else EXIT_NONCONV


def _sweep_row(cfg, args, s, base):
    p = cfg.params.scaled_feedback(s)
    row = {"scale": s, "h_norm": p.feedback().norm, "H": p.H}
    # covariance flow under the frozen baseline intensity
    frozen = integrate_riccati(base.beta_star, cfg.sigma0(), p, cfg.psd_tol)
    row["riccati_breakdown"] = not frozen.complete
    row["breakdown_time"] = None if frozen.complete else frozen.breakdown.time
    row["breakdown_mode"] = None if frozen.complete else frozen.breakdown.mode
    try:
        sol = _solve(cfg, args, p)
    except SolverBreakdown as exc:
        row["error"] = f"solver breakdown: {exc}"
        return row
    row["converged"] = sol.converged
    row["beta_dev_L2"] = l2_norm(sol.beta_star.values - base.beta_star.values, sol.grid.dt)
    row["J"] = sol.profit_J
    row["Lambda"] = lambda_sup(sol.cov_path, sol.beta_star, p).Lambda
    row["filter_unstable"] = row["Lambda"] > 0
    try:
        G_m, G_c = dc_gains(sol.cov_path, sol.beta_star, p)
        rep = stability_report(G_m, G_c, p)
        row.update(G_m=G_m, G_c=G_c, rho_F=rep.rho_F, norm_inf=rep.norm_inf,
                   norm_1=rep.norm_1, spectral_ok=rep.spectral_ok,
                   norm_inf_ok=rep.norm_inf_ok, norm_1_ok=rep.norm_1_ok, hurwitz=rep.hurwitz)
    except NoStationaryGain as exc:
        row["error"] = str(exc)
    try:
        row["L_estimate"] = estimate_lipschitz(sol.beta_star, p, args.n_probes, seed=args.seed,
                                               sigma0=cfg.sigma0())
    except (MapEvaluationError, DegenerateImpactError) as exc:
        row["error"] = (row.get("error", "") + "; " if row.get("error") else "") + str(exc)
    return row


SWEEP_COLUMNS = ["scale", "h_norm", "H", "converged", "beta_dev_L2", "J", "G_m", "G_c",
                 "rho_F", "norm_inf", "norm_1", "spectral_ok", "norm_inf_ok", "norm_1_ok",
                 "hurwitz", "Lambda", "filter_unstable", "L_estimate", "riccati_breakdown",
                 "breakdown_time", "breakdown_mode", "error"]


def cmd_sweep(cfg, args, out):
    if args.n_points < 1 or not args.s_max > 0:
        raise InputError("sweep range is empty: need --n-points >= 1 and --s-max > 0")
    scales = np.linspace(0.0, args.s_max, args.n_points + 1)[1:] if args.n_points > 1 \
        else np.array([args.s_max])
    scales = np.concatenate([[0.0], scales])
    base = _solve(cfg, args, cfg.params.scaled_feedback(0.0))
    if args.threads > 1:
        with ThreadPoolExecutor(args.threads) as ex:
            rows = list(ex.map(lambda s: _sweep_row(cfg, args, float(s), base), scales))
    else:
        rows = [_sweep_row(cfg, args, float(s), base) for s in scales]
    write_csv(os.path.join(out, "sweep.csv"), SWEEP_COLUMNS,
              [[r.get(c) for c in SWEEP_COLUMNS] for r in rows])
    L = np.array([r.get("L_estimate", np.nan) for r in rows], dtype=float)
    h = np.array([r["h_norm"] for r in rows])
    above = np.nonzero(L > 1.0)[0]
    write_json(os.path.join(out, "contraction.json"), {
        "h_values": h, "L_estimates": L,
        "crossing": float(h[above[0]]) if len(above) else None})
    flagged = sum(bool(r["riccati_breakdown"]) for r in rows)
    print(f"{len(rows)} rows written; {flagged} past the Riccati breakdown threshold")
    return EXIT_OK


def cmd_simulate(cfg, args, out):
    sol = _solve(cfg, args)
    p = cfg.params
    mc = monte_carlo(args.n_paths, args.seed, sol.beta_star, p, sigma0=cfg.sigma0(),
                     cov_path=sol.cov_path)
    d = mc.to_dict()
    d["equilibrium_converged"] = sol.converged
    write_json(os.path.join(out, "mc_summary.json"), d)
    if args.export_paths:
        rows = []
        for i in range(min(args.export_paths, args.n_paths)):
            rec = simulate_path(args.seed, sol.beta_star, p, sigma0=cfg.sigma0(),
                                cov_path=sol.cov_path, path_index=i)
            t = rec.grid.times
            for k in range(len(t)):
                th = rec.theta[k] if k < len(rec.theta) else np.nan
                rows.append([i, t[k], rec.v, rec.m[k], rec.c[k], rec.eps_state[k], rec.Y[k],
                             rec.P[k], th])
        write_csv(os.path.join(out, "paths.csv"),
                  ["path", "t", "v", "m", "c", "eps", "Y", "P", "theta"], rows)
    print(f"mean X_T = {mc.mean_XT:.6g} +- {mc.se_XT:.2g} (analytic {mc.analytic_J:.6g})")
    return EXIT_OK if sol.converged else EXIT_NONCONV


def cmd_stability(cfg, args, out):
    p = cfg.params
    if (args.G_m is None) != (args.G_c is None):
        raise InputError("--G-m and --G-c must be given together")
    converged = True
    if args.G_m is not None:
        G_m, G_c = args.G_m, args.G_c
        source = "given"
    else:
        sol = _solve(cfg, args)
        converged = sol.converged
        try:
            G_m, G_c = dc_gains(sol.cov_path, sol.beta_star, p, window=args.window)
        except NoStationaryGain as exc:
            write_json(os.path.join(out, "stability.json"), {"error": str(exc)})
            print(str(exc))
            return EXIT_NONCONV
        source = f"dc_gain ({args.window})"
    rep = stability_report(G_m, G_c, p)
    d = rep.to_dict()
    d["gain_source"] = source
    write_json(os.path.join(out, "stability.json"), d)
    print(f"rho(F) = {rep.rho_F:.6g}  spectral_ok = {rep.spectral_ok}  hurwitz = {rep.hurwitz}")
    return EXIT_OK if converged else EXIT_NONCONV


def cmd_sensitivity(cfg, args, out):
    p = cfg.params
    sol = _solve(cfg, args)
    sens = integrate_sensitivity(sol.cov_path, sol.beta_star, p, param=args.param)
    fd = None
    if args.param in ("gamma_F", "gamma_C"):
        e = args.eps
        up = integrate_riccati(sol.beta_star, cfg.sigma0(),
                               p.replace(**{args.param: getattr(p, args.param) + e}))
        dn = integrate_riccati(sol.beta_star, cfg.sigma0(),
                               p.replace(**{args.param: getattr(p, args.param) - e}))
        if up.complete and dn.complete:
            fd = (up.vv - dn.vv) / (2 * e)
    write_csv(os.path.join(out, "sensitivity.csv"), *sensitivity_rows(sens, fd))
    summary = {"param": args.param, "eps": args.eps, "baseline_converged": sol.converged,
               "dvv_negative_for_t_positive": bool(np.all(sens.dvv[1:] < 0))}
    if args.param == "gamma_F" and args.statics_eps > 0:
        cs = comparative_statics(sol, p, args.statics_eps, threads=args.threads,
                                 n_cut=10, max_iters=args.max_iters)
        summary["comparative_statics"] = cs.to_dict()
    write_json(os.path.join(out, "sensitivity.json"), summary)
    print(f"dvv(T) = {sens.dvv[-1]:.6g}")
    return EXIT_OK if sol.converged else EXIT_NONCONV


def cmd_riccati(cfg, args, out):
    p = cfg.params
    grid = cfg.grid().truncated(10)
    s0 = cfg.sigma0()
    beta = classical_intensity(grid, p, s0.vv, horizon=p.T)
    path = integrate_riccati(beta, s0, p, cfg.psd_tol)
    write_csv(os.path.join(out, "riccati.csv"), *cov_path_rows(path))
    info = {"beta": "classical", "complete": path.complete,
            "breakdown": None if path.complete else vars(path.breakdown)}
    if path.complete:
        gp = gain_path(path, beta, p, _impact_variant(args))
        write_csv(os.path.join(out, "gains.csv"), *gain_path_rows(gp))
        rep = lambda_sup(path, beta, p)
        info.update(Lambda=rep.Lambda, argmax_time=rep.argmax_time, unstable=rep.unstable)
    write_json(os.path.join(out, "riccati.json"), info)
    print("complete" if path.complete else f"breakdown: {path.breakdown}")
    return EXIT_OK


def cmd_breakdown(cfg, args, out):
    p = cfg.params
    if not (0 < args.H_min < args.H_max) or args.H_points < 2:
        raise InputError("need 0 < --H-min < --H-max and --H-points >= 2")
    grid = cfg.grid().truncated(10)
    s0 = cfg.sigma0()
    beta = classical_intensity(grid, p, s0.vv, horizon=p.T)
    direction = (p.gamma_F, p.gamma_C) if p.H > 0 else (1.0, 0.0)
    H_grid = np.geomspace(args.H_min, args.H_max, args.H_points)
    res = scan_blowup(p, beta, H_grid, sigma0=s0, direction=direction, psd_tol=cfg.psd_tol,
                      threads=args.threads)
    write_csv(os.path.join(out, "breakdown.csv"), ["H", "completed", "time", "mode"],
              [[r.H, r.completed, r.time, r.mode] for r in res.records + res.refinement])
    write_json(os.path.join(out, "breakdown.json"), {
        "direction": res.direction, "H_star_estimate": res.H_star_estimate,
        "bracket": res.bracket, "monotone": res.monotone, "violations": res.violations,
        "message": res.message})
    print(res.message)
    return EXIT_OK


COMMANDS = {
    "equilibrium": cmd_equilibrium, "sweep": cmd_sweep, "simulate": cmd_simulate,
    "stability": cmd_stability, "sensitivity": cmd_sensitivity, "riccati": cmd_riccati,
    "breakdown": cmd_breakdown,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON model config")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--paper-literal-lambda", action="store_true",
                        help="report price impact as Svv * beta")
    common.add_argument("--tol", type=float, default=1e-10)
    common.add_argument("--max-iters", type=int, default=200)

    ap = argparse.ArgumentParser(prog="kyle-feedback", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("equilibrium", parents=[common], help="solve for the equilibrium intensity")
    sp = sub.add_parser("sweep", parents=[common], help="scan the feedback ray")
    sp.add_argument("--s-max", type=float, default=1.0)
    sp.add_argument("--n-points", type=int, default=10)
    sp.add_argument("--n-probes", type=int, default=4)
    sp = sub.add_parser("simulate", parents=[common], help="Monte Carlo of the market")
    sp.add_argument("--n-paths", type=int, default=1000)
    sp.add_argument("--export-paths", type=int, default=0)
    sp = sub.add_parser("stability", parents=[common], help="closed-loop stability report")
    sp.add_argument("--G-m", type=float, default=None)
    sp.add_argument("--G-c", type=float, default=None)
    sp.add_argument("--window", choices=["mean", "terminal"], default="mean")
    sp = sub.add_parser("sensitivity", parents=[common], help="first-order sensitivity")
    sp.add_argument("--param", default="gamma_F",
                    choices=["gamma_F", "gamma_C", "kappa_m", "kappa_c"])
    sp.add_argument("--eps", type=float, default=1e-4)
    sp.add_argument("--statics-eps", type=float, default=0.0,
                    help="also re-solve at gamma_F +- eps (0 disables)")
    sub.add_parser("riccati", parents=[common], help="covariance flow under the Kyle intensity")
    sp = sub.add_parser("breakdown", parents=[common], help="Riccati breakdown scan")
    sp.add_argument("--H-min", type=float, default=1.0)
    sp.add_argument("--H-max", type=float, default=1e6)
    sp.add_argument("--H-points", type=int, default=13)
    return ap


def _manifest(args, cfg):
    opts = {k: v for k, v in sorted(vars(args).items()) if k not in ("config", "out")}
    return {"artifact": "kyle_feedback", "version": __version__, "command": args.command,
            "config_path": os.path.abspath(args.config), "config": cfg.to_dict(),
            "options": opts, "seeds": {"base_seed": args.seed}}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise InputError("--threads must be >= 1")
        if not args.tol > 0:
            raise InputError("--tol must be positive")
        if args.max_iters < 1:
            raise InputError("--max-iters must be >= 1")
        cfg = load_config(args.config)
        out = ensure_dir(args.out)
        write_json(os.path.join(out, "manifest.json"), _manifest(args, cfg))
        return COMMANDS[args.command](cfg, args, out)
    except (ParameterError, InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SolverBreakdown as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_NONCONV


if __name__ == "__main__":
    sys.exit(main())
