"""Config-driven verification suites with machine-readable reports.

Each suite returns a report dict of named checks; hard checks decide the
exit code, soft checks only log fitted constants and diagnostics.  Reports
are written as deterministic JSON (sorted keys, no timestamps; wall-clock
data goes to metadata.json), CSV dumps use 17 significant digits, and each
suite renders PNG figures next to its outputs.
"""
from __future__ import annotations

import json
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dynamics, hjb, master, models, nash, plots, solver
from .config import ExperimentConfig
from .graphs import grad, h_log, path_graph, theta_mat
from .models import GameSpec
from .timegrid import GridFn

__all__ = ["run_experiment", "run_suite", "SUITE_RUNNERS"]


def _check(name, value, tol=None, passed=None, soft=False):
    if passed is None:
        passed = bool(value <= tol)
    entry = {"name": name, "value": _jsonable(value), "passed": bool(passed),
             "soft": bool(soft)}
    if tol is not None:
        entry["tol"] = tol
    return entry


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj


def _report(name, checks, **extra):
    hard = [c for c in checks if not c["soft"]]
    return {"suite": name,
            "passed": all(c["passed"] for c in hard),
            "n_checks": len(checks),
            "checks": checks,
            **{k: _jsonable(v) for k, v in extra.items()}}


def _solver_kw(cfg: ExperimentConfig) -> dict:
    kw = {"tol": cfg.numerics["tol"]}
    if cfg.numerics["n_steps"]:
        kw["n_steps"] = int(cfg.numerics["n_steps"])
    return kw


# ---------------------------------------------------------------------------
# interiority suite
# ---------------------------------------------------------------------------

def run_interiority(cfg: ExperimentConfig, out: Path) -> dict:
    g = cfg.graph
    spec = cfg.build_spec()
    checks = []
    t_span = (0.0, cfg.horizon)
    dt = cfg.numerics["dt"] or (cfg.horizon / 2000.0)
    t0, mu0 = cfg.initials[0]

    # zero-flux heat trajectory: conservation, positivity, envelope
    heat = dynamics.integrate_continuity(g, lambda s, m: np.zeros((g.n, g.n)),
                                         mu0, t_span, dt)
    checks.append(_check("heat_mass_drift", heat.mass_drift(), 1e-10))
    checks.append(_check("heat_positive", -heat.min_density(), 0.0))
    eps0 = float(mu0.min()) * 0.999
    rep = dynamics.interiority_report(heat, eps0)
    checks.append(_check("heat_envelope_exists", rep["fitted_c"],
                         passed=rep["bound_holds"], soft=False))
    dynamics.dump_trajectory_csv(heat, out / "interiority_heat.csv")
    plots.density_figure(heat.fn.grid.half, heat.values,
                         out / "figures" / "interiority_heat.png")
    plots.envelope_figure(rep["times"], rep["min_profile"], rep["fitted_c"],
                          rep["fitted_r"], eps0,
                          out / "figures" / "interiority_envelope.png")

    # model flux driven by a fixed smooth momentum profile
    rng = np.random.default_rng(cfg.seed or 0)
    pattern = models.random_edge_field(rng, g)
    pattern /= max(1.0, np.max(np.abs(pattern)))

    def model_flux(s, mu):
        return models.dp_hamiltonian(spec, mu, np.sin(2.0 * np.pi * s) * pattern)

    traj = dynamics.integrate_continuity(g, model_flux, mu0, t_span, dt)
    checks.append(_check("model_flux_mass_drift", traj.mass_drift(), 1e-10))
    rep_m = dynamics.interiority_report(traj, eps0)
    checks.append(_check("model_flux_envelope", rep_m["fitted_c"],
                         passed=rep_m["bound_holds"]))
    # mobility domination |A| <= (mu_i + mu_j) h(mu_j/mu_i) along the path
    worst = 0.0
    for j in range(0, traj.fn.grid.n_half, max(1, traj.fn.grid.n_half // 64)):
        mu_j = traj.values[j]
        s_j = traj.fn.grid.half[j]
        a = model_flux(s_j, mu_j)
        prof = models.mobility_profile(spec, mu_j[None, :] / mu_j[:, None],
                                       np.sin(2.0 * np.pi * s_j) * pattern)
        bound = (mu_j[:, None] + mu_j[None, :]) * prof
        on = g.adjacency
        worst = max(worst, float(np.max(np.abs(a[on]) - bound[on])))
    checks.append(_check("mobility_bound_defect", worst, 1e-10))

    # adversarial saturating fluxes: envelope must exist for every config
    fitted = []
    near_boundary = np.full(g.n, 0.02 / max(1, g.n - 1))
    near_boundary[0] = 1.0 - near_boundary[1:].sum()
    for idx, (mag, pat_seed) in enumerate([(1.0, 0), (2.0, 0), (4.0, 0),
                                           (2.0, 1), (4.0, 1)]):
        prng = np.random.default_rng(pat_seed)
        signs = g.edge_field(prng.choice([-1.0, 1.0], size=g.n_edges))

        def adv_flux(s, mu, signs=signs, mag=mag):
            ratio = mu[None, :] / mu[:, None]
            return np.where(g.adjacency,
                            mag * (mu[:, None] + mu[None, :]) * h_log(ratio) * signs,
                            0.0)

        mu_start = mu0 if idx % 2 == 0 else near_boundary
        eps_a = float(np.min(mu_start)) * 0.999
        traj_a = dynamics.integrate_continuity(g, adv_flux, mu_start, t_span, dt)
        rep_a = dynamics.interiority_report(traj_a, eps_a)
        fitted.append({"magnitude": mag, "pattern_seed": pat_seed,
                       "fitted_c": rep_a["fitted_c"], "fitted_r": rep_a["fitted_r"]})
        checks.append(_check(f"adversarial_envelope_{idx}", rep_a["fitted_c"],
                             passed=rep_a["bound_holds"]))
        checks.append(_check(f"adversarial_mass_{idx}", traj_a.mass_drift(), 1e-10))

    # RK4 order factor on the closed-form two-state heat flow
    k2 = path_graph(2)
    exact = lambda s: 0.5 + 0.4 * np.exp(-2.0 * s)  # noqa: E731
    errs = []
    for step in (0.1, 0.05):
        tr = dynamics.integrate_continuity(k2, lambda s, m: np.zeros((2, 2)),
                                           [0.9, 0.1], (0.0, 1.0), step)
        nodes = tr.fn.grid.nodes
        errs.append(float(np.max(np.abs(tr.fn.node_values[:, 0] - exact(nodes)))))
    order_factor = errs[0] / max(errs[1], 1e-300)
    checks.append(_check("rk4_halving_factor", order_factor,
                         passed=order_factor >= 12.0))

    return _report("interiority", checks, fitted_envelopes=fitted,
                   rk4_errors=errs)


# ---------------------------------------------------------------------------
# mfg suite
# ---------------------------------------------------------------------------

def run_mfg(cfg: ExperimentConfig, out: Path) -> dict:
    spec = cfg.build_spec()
    checks = []
    kw = _solver_kw(cfg)
    details = []
    for idx, (t, mu) in enumerate(cfg.initials):
        sol = solver.homotopy_solve(spec, t, mu, lambda_steps=1, **kw)
        tag = f"init{idx}"
        checks.append(_check(f"{tag}_residual", sol.residual(), 1e-6))
        checks.append(_check(f"{tag}_terminal_gap", sol.terminal_gap(),
                             10.0 * cfg.numerics["tol"]))
        checks.append(_check(f"{tag}_initial_density", sol.initial_density_gap(), 1e-12))
        checks.append(_check(f"{tag}_interior_min", sol.min_density(),
                             passed=sol.min_density() > 0.0, soft=False))
        ll = solver.lasry_lions_probe(spec, sol)
        checks.append(_check(f"{tag}_lasry_lions", ll, passed=ll <= 0.0))
        ratio = solver.phi_bound_probe(sol, float(np.min(mu)))
        checks.append(_check(f"{tag}_phi_bound_ratio", ratio, soft=True,
                             passed=ratio <= 1.0))
        uniq = solver.uniqueness_probe(spec, t, mu, seed=cfg.seed or 0, **kw)
        checks.append(_check(f"{tag}_uniqueness", uniq, 1e-6))
        flow = solver.flow_property_check(spec, t, t + 0.5 * (spec.horizon - t),
                                          mu, **kw)
        checks.append(_check(f"{tag}_flow_property", flow, 1e-6))
        op = solver.ShootingOperator(sol)
        zero = op.solve(np.zeros(spec.n))
        checks.append(_check(f"{tag}_lin_zero_direction",
                             float(np.max(np.abs(zero.psi.values))
                                   + np.max(np.abs(zero.eta.values))), 1e-12))
        checks.append(_check(f"{tag}_shooting_condition", op.condition, soft=True,
                             passed=np.isfinite(op.condition)))
        details.append({"t": t, "iterations": sol.iterations, "gap": sol.gap,
                        "residual_phi": sol.residual_phi,
                        "residual_rho": sol.residual_rho,
                        "min_density": sol.min_density(),
                        "condition": op.condition})
        if idx == 0:
            solver.dump_solution_csv(sol, out / "mfg_solution.csv")
            plots.solution_figure(sol.grid.nodes, sol.phi.node_values,
                                  sol.rho.node_values,
                                  out / "figures" / "mfg_solution.png")
    mono = models.monotonicity_check(spec, samples=300, seed=cfg.seed or 0)
    checks.append(_check("monotonicity_min_gap", mono["min_lasry_lions_gap"],
                         passed=mono["min_lasry_lions_gap"] > 0.0))
    return _report("mfg", checks, solves=details, monotonicity=mono)


# ---------------------------------------------------------------------------
# master suite
# ---------------------------------------------------------------------------

def run_master(cfg: ExperimentConfig, out: Path) -> dict:
    spec = cfg.build_spec()
    checks = []
    kw = _solver_kw(cfg)
    rows = []
    worst = 0.0
    n_pts = int(cfg.numerics["master_points"])
    fracs = np.linspace(0.15, 0.7, n_pts)
    for idx, (t, mu) in enumerate(cfg.initials):
        for k, f in enumerate(fracs):
            tt = t + f * (spec.horizon - t)
            res = master.master_residual(spec, float(tt), mu, **kw)
            rows.append((float(tt), mu, res))
            worst = max(worst, float(np.max(np.abs(res))))
            checks.append(_check(f"residual_init{idx}_pt{k}",
                                 float(np.max(np.abs(res))), 1e-4))
    master.dump_residual_sweep_csv(out / "master_residuals.csv", rows)

    # order-2 decay of the time difference
    t0, mu0 = cfg.initials[0]
    tt = t0 + 0.3 * (spec.horizon - t0)
    hs = (1e-2, 5e-3, 2.5e-3)
    decay = [float(np.max(np.abs(master.master_residual(spec, tt, mu0, h_t=h, **kw))))
             for h in hs]
    for k in range(len(hs) - 1):
        ratio = decay[k] / max(decay[k + 1], 1e-300)
        checks.append(_check(f"order2_ratio_{k}", ratio,
                             passed=2.0 <= ratio <= 8.0))
    plots.residual_order_figure(hs, decay, out / "figures" / "master_order.png",
                                title="master residual vs h_t")

    consistency = master.trajectory_consistency(spec, t0, mu0, **kw)
    checks.append(_check("trajectory_consistency", consistency, 1e-6))

    rng = np.random.default_rng(cfg.seed or 0)
    term_worst = 0.0
    for _ in range(100):
        mu_r = models.random_interior(rng, spec.n)
        gap = float(np.max(np.abs(master.value(spec, spec.horizon, mu_r)
                                  - models.g_map(spec, mu_r))))
        term_worst = max(term_worst, gap)
    checks.append(_check("terminal_identity", term_worst, 1e-14))
    return _report("master", checks, max_residual=worst, decay=decay)


# ---------------------------------------------------------------------------
# hjb suite
# ---------------------------------------------------------------------------

def run_hjb(cfg: ExperimentConfig, out: Path) -> dict:
    spec = cfg.build_spec()
    if spec.extended_beta != 0.0:
        return _report("hjb", [_check("skipped_extended_flux", 0.0,
                                      passed=True, soft=True)],
                       note="action value requires the variational flux")
    checks = []
    kw = _solver_kw(cfg)
    grid_n = int(cfg.numerics["direct_grid"])
    iota0, iota_t = hjb.iota_bounds(spec, 0.0)
    values = []
    for idx, (t, mu) in enumerate(cfg.initials):
        fb = hjb.value_by_fb(spec, t, mu, **kw)
        dm = hjb.value_by_direct_min(spec, t, mu, grid_n=grid_n, **kw)
        tag = f"init{idx}"
        gap = abs(dm.value - fb.value)
        checks.append(_check(f"{tag}_dual_value_gap", gap,
                             1e-4 * (1.0 + abs(fb.value))))
        lo, hi = hjb.iota_bounds(spec, t)
        checks.append(_check(f"{tag}_iota_bounds", fb.value,
                             passed=lo <= fb.value <= hi))
        checks.append(_check(f"{tag}_minimizer_interior",
                             dm.minimizer.min_density(),
                             passed=dm.minimizer.min_density() > 0.0))
        checks.append(_check(f"{tag}_continuity_defect",
                             dm.minimizer.continuity_defect(spec.graph), 1e-12))
        hold = hjb.holder_ratio(spec, fb)
        checks.append(_check(f"{tag}_holder_ratio", hold, passed=hold <= 1.05))
        values.append({"t": t, "fb": fb.value, "direct": dm.value,
                       "iterations": dm.meta["iterations"]})
        if idx == 0:
            hjb.dump_action_path_csv(spec.graph, dm.minimizer,
                                     out / "hjb_minimizer.csv")
            plots.minimizer_figure(dm.minimizer.grid.nodes, dm.minimizer.rho,
                                   out / "figures" / "hjb_minimizer.png")

    t0, mu0 = cfg.initials[0]
    gid = hjb.gradient_identity_check(spec, t0, mu0, **kw)
    checks.append(_check("gradient_identity", gid, 1e-4))
    tt = t0 + 0.4 * (spec.horizon - t0)
    res = abs(hjb.hjb_residual(spec, float(tt), mu0, **kw))
    checks.append(_check("hjb_residual", res, 1e-4))
    margin = hjb.convexity_probe(spec, t0, samples=int(cfg.numerics["hjb_chords"]),
                                 seed=cfg.seed or 0, **kw)
    checks.append(_check("convexity_min_margin", margin, passed=margin > -1e-6))
    ratio = hjb.semiconcavity_probe(spec, t0, mu0, seed=cfg.seed or 0, **kw)
    checks.append(_check("semiconcavity_ratio", ratio, soft=True,
                         passed=np.isfinite(ratio)))
    return _report("hjb", checks, values=values,
                   iota=[iota0, iota_t], convexity_margin=margin,
                   semiconcavity_ratio=ratio)


# ---------------------------------------------------------------------------
# nash suite
# ---------------------------------------------------------------------------

def run_nash(cfg: ExperimentConfig, out: Path) -> dict:
    spec = cfg.build_spec()
    checks = []
    kw = _solver_kw(cfg)
    seed = int(cfg.seed)
    t0, mu0 = cfg.initials[0]
    opts = cfg.nash_options
    n_mc = int(cfg.numerics["mc_paths"]) if cfg.numerics["mc_enabled"] else 0
    cert = nash.nash_certificate(
        spec, mu0, magnitudes=tuple(opts["deviation_magnitudes"]),
        n_random_dirs=int(opts["random_directions"]), n_mc=n_mc, seed=seed,
        time_modulated=int(opts["time_modulated"]), t=t0, **kw)
    if cert["status"] == "NOT-APPLICABLE":
        checks.append(_check("equilibrium_admissible", cert["min_offdiag"],
                             passed=False, soft=True))
        report = _report("nash", checks, certificate=cert, status="NOT-APPLICABLE")
        report["passed"] = True  # reported state, not a failure
        return report
    checks.append(_check("equilibrium_admissible", cert["min_offdiag"],
                         passed=True))
    checks.append(_check("equality_gap", cert["equality_gap"], 1e-5))
    checks.append(_check("min_deviation_gap", cert["min_gap"],
                         passed=cert["min_gap"] >= -1e-8))
    if cert["min_full_gap"] is not None:
        checks.append(_check("min_full_deviation_gap", cert["min_full_gap"],
                             passed=cert["min_full_gap"] >= -1e-8))
    if "mc" in cert:
        checks.append(_check("mc_vs_ode_z", cert["mc"]["max_z_vs_ode"], 3.0))
    plots.deviation_gaps_figure(cert["deviation_gaps"],
                                out / "figures" / "nash_gaps.png")

    # propagator structure on the equilibrium chain
    oc = nash.optimal_control(spec, mu0, t=t0, **kw)
    psi = nash.propagator(oc.rate, t0)
    row_defect = float(np.max(np.abs(psi.values.sum(axis=2) - 1.0)))
    checks.append(_check("propagator_row_sums", row_defect, 1e-10))
    rng_defect = float(max(np.max(psi.values.max() - 1.0), np.max(-psi.values)))
    checks.append(_check("propagator_entry_range", rng_defect, 1e-10))
    mid = oc.solution.grid.nodes[oc.solution.grid.n_steps // 2]
    psi_mid = nash.propagator(oc.rate, float(mid))
    ck = float(np.max(np.abs(psi.terminal()
                             - psi(float(mid)) @ psi_mid.terminal())))
    checks.append(_check("chapman_kolmogorov", ck, 1e-8))
    consist = nash.consistency_check(spec.graph, oc.v, oc.rho)
    checks.append(_check("control_flow_consistency", consist, 1e-6))

    # martingale probe along the value function
    probe_paths = min(20000, n_mc) if n_mc else 20000
    sample = nash.sample_chain_batch(oc.rate, 0, probe_paths, seed + 101)
    probe = nash.martingale_probe(sample, oc.rate, oc.solution.phi)
    checks.append(_check("martingale_z", probe["z"], 4.0))
    checks.append(_check("martingale_identity", probe["identity_gap"], 1e-8))

    # seed determinism of the Monte Carlo layer
    m1, e1 = nash.cost_J_mc(spec, oc.rate, oc.rho, oc.v, t0, n_paths=2000,
                            seed=seed)
    m2, e2 = nash.cost_J_mc(spec, oc.rate, oc.rho, oc.v, t0, n_paths=2000,
                            seed=seed)
    det = float(np.max(np.abs(m1 - m2)) + np.max(np.abs(e1 - e2)))
    checks.append(_check("mc_seed_determinism", det, 0.0))

    extra = {"certificate": cert, "martingale": probe}
    if opts["torus_sweep"]:
        sweep = nash.torus_admissibility_sweep(
            tuple(int(x) for x in opts["torus_sweep"]),
            family=cfg.model["family"], c_f=cfg.model["cF"],
            c_t=cfg.model["cT"], horizon=cfg.horizon, tol=cfg.numerics["tol"])
        margins = [e["margin"] for e in sweep]
        monotone = all(margins[k + 1] > margins[k] for k in range(len(margins) - 1))
        checks.append(_check("torus_margin_monotone", margins,
                             passed=monotone))
        plots.torus_margin_figure(sweep, out / "figures" / "nash_torus_sweep.png")
        extra["torus_sweep"] = sweep
    return _report("nash", checks, **extra)


SUITE_RUNNERS = {
    "interiority": run_interiority,
    "mfg": run_mfg,
    "master": run_master,
    "hjb": run_hjb,
    "nash": run_nash,
}


def run_suite(name: str, cfg: ExperimentConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / "figures").mkdir(exist_ok=True)
    return SUITE_RUNNERS[name](cfg, out)


def run_experiment(cfg: ExperimentConfig, out_dir, suites=None, jobs: int = 1,
                   config_path=None, log=print) -> int:
    """Run the selected suites, write reports, return the exit code."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "figures").mkdir(exist_ok=True)
    selected = list(suites) if suites else list(cfg.suites)
    reports = {}
    if jobs > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {name: pool.submit(run_suite, name, cfg, out)
                       for name in selected}
            for name in selected:
                reports[name] = futures[name].result()
    else:
        for name in selected:
            reports[name] = run_suite(name, cfg, out)

    summary = {"suites": {}, "all_passed": True}
    for name in selected:
        rep = reports[name]
        with open(out / f"{name}.json", "w") as fh:
            json.dump(rep, fh, indent=1, sort_keys=True)
            fh.write("\n")
        failures = [c["name"] for c in rep["checks"]
                    if not c["passed"] and not c["soft"]]
        summary["suites"][name] = {
            "passed": rep["passed"],
            "n_checks": rep["n_checks"],
            "failures": failures,
        }
        summary["all_passed"] = summary["all_passed"] and rep["passed"]
        status = "PASS" if rep["passed"] else "FAIL"
        log(f"[{status}] suite {name}: {rep['n_checks']} checks"
            + (f", failures: {', '.join(failures)}" if failures else ""))
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_metadata(out, config_path)
    return 0 if summary["all_passed"] else 1


def _write_metadata(out: Path, config_path) -> None:
    import datetime
    import platform

    meta = {
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(),
    }
    with open(out / "metadata.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    if config_path is not None:
        try:
            shutil.copy(config_path, out / "config.json")
        except OSError:
            pass
