"""Acceptance criteria, one test per criterion.

Each test prints a single PASS line with its runtime; tolerances are pinned
to the stated values.  The shared baseline instance is the 4-cycle with unit
weights, quadratic family, cF = cT = 1, T = 1, mu = (0.4, 0.3, 0.2, 0.1).
"""
import time

import numpy as np
import pytest

from graphmfg import dynamics as D
from graphmfg import graphs as G
from graphmfg import hjb as H
from graphmfg import master as ME
from graphmfg import models as M
from graphmfg import nash as N
from graphmfg import solver as S

MU = np.array([0.4, 0.3, 0.2, 0.1])
KW = dict(n_steps=512, tol=1e-10)


class Budget:
    def __init__(self, name, seconds):
        self.name = name
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        if exc_type is None:
            print(f"PASS {self.name} [{elapsed:.1f}s / budget {self.seconds}s]")
            assert elapsed < self.seconds, \
                f"{self.name} exceeded its runtime budget: {elapsed:.1f}s"
        else:
            print(f"FAIL {self.name} [{elapsed:.1f}s]")
        return False


@pytest.fixture(scope="module")
def spec():
    return M.make_game(G.cycle_graph(4), horizon=1.0)


def test_criterion_1_graph_calculus(c4):
    with Budget("criterion-1 graph-calculus identities", 1.0):
        rng = np.random.default_rng(101)
        graphs = [c4, G.path_graph(5), G.complete_graph(4, 0.7)]
        for g in graphs:
            for _ in range(1000 // len(graphs) + 1):
                m = g.edge_field(rng.standard_normal(g.n_edges))
                u = rng.standard_normal(g.n)
                lhs = float(G.div(g, m) @ u)
                rhs = -G.edge_inner(m, G.grad(g, u))
                assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))
                lap = G.laplacian(g, u)
                comp = G.div(g, G.grad(g, u))
                assert np.max(np.abs(lap - comp)) <= 1e-14 * max(1.0, np.max(np.abs(lap)))
        r = np.exp(rng.uniform(np.log(1e-8), np.log(1e2), 1000))
        s = np.exp(rng.uniform(np.log(1e-8), np.log(1e2), 1000))
        th = G.theta(r, s)
        d1 = G.theta_d1(r, s)
        d2 = G.theta_d2(r, s)
        assert np.all(np.abs(r * d1 + s * d2 - th) <= 1e-10 * (1.0 + th))
        assert np.all(np.abs(d1 - G.theta_d2(s, r)) <= 1e-12 * (1.0 + np.abs(d1)))


def test_criterion_2_legendre_duality(spec, c4):
    with Budget("criterion-2 Legendre/duality suite", 2.0):
        rng = np.random.default_rng(102)
        for _ in range(1000):
            mu = M.random_interior(rng, 4)
            m = M.random_edge_field(rng, c4)
            p = M.dm_lagrangian(spec, mu, m)
            gap = (M.lagrangian(spec, mu, m) + M.hamiltonian(spec, mu, p)
                   - G.edge_inner(m, p))
            assert abs(gap) < 1e-9
            # duality of the density derivatives at the matched momentum
            assert np.max(np.abs(M.dmu_lagrangian(spec, mu, m)
                                 + M.dmu_hamiltonian(spec, mu, p))) < 1e-8
            # exact mobility identity of the quadratic family
            dp = np.abs(M.dp_hamiltonian(spec, mu, p))
            ratio = mu[None, :] / mu[:, None]
            bound = (mu[:, None] + mu[None, :]) * G.h_log(ratio) * np.abs(p)
            assert np.max(np.abs(dp[c4.adjacency] - bound[c4.adjacency])) < 1e-10


def test_criterion_3_continuity_equation(spec, c4):
    with Budget("criterion-3 continuity order and conservation", 10.0):
        k2 = G.path_graph(2)
        zero = lambda s, mu: np.zeros((2, 2))  # noqa: E731
        traj = D.integrate_continuity(k2, zero, [0.9, 0.1], (0.0, 1.0), 1 / 2000)
        exact = 0.5 + 0.4 * np.exp(-2.0)
        assert abs(traj.fn.terminal()[0] - exact) <= 1e-8
        assert traj.mass_drift() <= 1e-10
        errs = []
        for dt in (0.1, 0.05):
            tr = D.integrate_continuity(k2, zero, [0.9, 0.1], (0.0, 1.0), dt)
            nodes = tr.fn.grid.nodes
            errs.append(np.max(np.abs(tr.fn.node_values[:, 0]
                                      - (0.5 + 0.4 * np.exp(-2 * nodes)))))
        assert errs[0] / errs[1] >= 12.0
        # five adversarial mobility-saturating fluxes admit an envelope
        c6 = G.cycle_graph(6)
        mu0 = np.full(6, 1.0 / 6.0)
        for idx, (mag, seed) in enumerate([(1.0, 0), (2.0, 0), (4.0, 0),
                                           (2.0, 1), (4.0, 1)]):
            prng = np.random.default_rng(seed)
            signs = c6.edge_field(prng.choice([-1.0, 1.0], size=c6.n_edges))

            def flux(s, mu, signs=signs, mag=mag):
                ratio = mu[None, :] / mu[:, None]
                return np.where(c6.adjacency,
                                mag * (mu[:, None] + mu[None, :])
                                * G.h_log(ratio) * signs, 0.0)

            tr = D.integrate_continuity(c6, flux, mu0, (0.0, 1.0), 1 / 2000)
            rep = D.interiority_report(tr, 0.16)
            assert rep["bound_holds"]
            assert np.isfinite(rep["fitted_r"]) and rep["fitted_c"] > 0.0
            assert tr.mass_drift() <= 1e-10


def test_criterion_4_mfg_solver(spec, c4):
    with Budget("criterion-4 MFG solver", 60.0):
        sol = S.picard_solve(spec, 0.0, MU, **KW)
        assert sol.residual() <= 1e-6
        ext = M.make_game(c4, extended_beta=0.1)
        sol_ext = S.picard_solve(ext, 0.0, MU, **KW)
        assert sol_ext.residual() <= 1e-6
        assert S.uniqueness_probe(spec, 0.0, MU, seed=11, **KW) <= 1e-6
        assert S.flow_property_check(spec, 0.0, 0.5, MU, **KW) <= 1e-6
        assert S.lasry_lions_probe(spec, sol) <= 0.0
        assert S.lasry_lions_probe(ext, sol_ext) <= 0.0


def test_criterion_5_linearization(spec):
    with Budget("criterion-5 linearization", 30.0):
        base = S.picard_solve(spec, 0.0, MU, n_steps=512, tol=1e-12)
        op = S.ShootingOperator(base)
        zero = op.solve(np.zeros(4))
        assert np.max(np.abs(zero.psi.values)) == 0.0
        assert np.max(np.abs(zero.eta.values)) == 0.0
        nu = np.array([1.0, -1.0, 0.0, 0.0]) / np.sqrt(2.0)
        lin = op.solve(nu)
        gaps = {}
        for h in (1e-2, 1e-3, 1e-4):
            up = S.picard_solve(spec, 0.0, MU + h * nu, n_steps=512,
                                tol=1e-12, phi0=base.phi.values)
            dn = S.picard_solve(spec, 0.0, MU - h * nu, n_steps=512,
                                tol=1e-12, phi0=base.phi.values)
            fd = (up.phi.values - dn.phi.values) / (2.0 * h)
            gaps[h] = float(np.max(np.abs(fd - lin.psi.values)))
        # O(h^2) regime above the solver floor, small gaps at the stated h
        assert gaps[1e-2] / gaps[1e-3] > 30.0
        assert gaps[1e-3] <= 1e-5
        assert gaps[1e-4] <= 1e-5


def test_criterion_6_master_equation(spec):
    with Budget("criterion-6 master equation", 120.0):
        rng = np.random.default_rng(106)
        points = [(t, MU) for t in (0.15, 0.35, 0.55, 0.75)]
        points += [(float(rng.uniform(0.1, 0.8)), M.random_interior(rng, 4))
                   for _ in range(6)]
        for t, mu in points:
            res = ME.master_residual(spec, t, mu, **KW)
            assert np.max(np.abs(res)) < 1e-4
        sups = [np.max(np.abs(ME.master_residual(spec, 0.3, MU, h_t=h, **KW)))
                for h in (1e-2, 5e-3, 2.5e-3)]
        assert 2.5 < sups[0] / sups[1] < 6.0
        assert 2.5 < sups[1] / sups[2] < 6.0
        assert ME.trajectory_consistency(spec, 0.0, MU, **KW) <= 1e-6


def test_criterion_7_hjb(spec):
    with Budget("criterion-7 HJB", 180.0):
        rng = np.random.default_rng(107)
        points = [(0.0, MU)] + [
            (float(rng.uniform(0.0, 0.6)), M.random_interior(rng, 4))
            for _ in range(4)]
        for t, mu in points:
            fb = H.value_by_fb(spec, t, mu, **KW)
            dm = H.value_by_direct_min(spec, t, mu, grid_n=384, **KW)
            assert abs(dm.value - fb.value) <= 1e-4 * (1.0 + abs(fb.value))
            lo, hi = H.iota_bounds(spec, t)
            assert lo <= fb.value <= hi
        assert H.gradient_identity_check(spec, 0.0, MU, **KW) < 1e-4
        assert abs(H.hjb_residual(spec, 0.4, MU, **KW)) < 1e-4
        margin = H.convexity_probe(spec, 0.0, samples=20, seed=7,
                                   n_steps=256, tol=1e-9)
        assert margin > 0.0
        r1 = H.semiconcavity_probe(spec, 0.0, MU, h=1e-3, n_random=2, seed=7,
                                   n_steps=256, tol=1e-9)
        r2 = H.semiconcavity_probe(spec, 0.0, MU, h=5e-4, n_random=2, seed=7,
                                   n_steps=256, tol=1e-9)
        assert np.isfinite(r1) and np.isfinite(r2)
        assert abs(r1 - r2) < 0.05 * (1.0 + abs(r1))


def test_criterion_8_nash_certification(spec):
    with Budget("criterion-8 Nash certification", 240.0):
        cert = N.nash_certificate(spec, MU, n_mc=100000, seed=1234, **KW)
        assert cert["status"] == "CHECKED", cert.get("violations")
        assert cert["equality_gap"] <= 1e-5
        assert cert["min_gap"] >= -1e-8
        assert cert["min_full_gap"] >= -1e-8
        assert cert["mc"]["max_z_vs_ode"] <= 3.0
        oc = N.optimal_control(spec, MU, **KW)
        psi = N.propagator(oc.rate, 0.0)
        assert np.max(np.abs(psi.values.sum(axis=2) - 1.0)) <= 1e-10
        grid = oc.solution.grid
        mid = float(grid.nodes[grid.n_steps // 2])
        compose = psi(mid) @ N.propagator(oc.rate, mid).terminal()
        assert np.max(np.abs(psi.terminal() - compose)) <= 1e-8
        sample = N.sample_chain_batch(oc.rate, 0, 20000, seed=55)
        probe = N.martingale_probe(sample, oc.rate, oc.solution.phi)
        assert probe["z"] <= 4.0
        a = N.cost_J_mc(spec, oc.rate, oc.rho, oc.v, 0.0, n_paths=5000, seed=9)
        b = N.cost_J_mc(spec, oc.rate, oc.rho, oc.v, 0.0, n_paths=5000, seed=9)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_criterion_9_torus_admissibility_sweep():
    with Budget("criterion-9 torus admissibility sweep", 120.0):
        sweep = N.torus_admissibility_sweep(sizes=(4, 8, 16), tol=1e-9)
        margins = [entry["margin"] for entry in sweep]
        assert all(m2 > m1 for m1, m2 in zip(margins, margins[1:])), margins
        assert all(entry["admissible"] for entry in sweep)
