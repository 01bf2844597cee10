"""Markov-chain layer: rate matrices, propagators, sampled and exact costs,
martingale structure, and the equilibrium certificate.
"""
import numpy as np
import pytest
from scipy.linalg import expm

from graphmfg import graphs as G
from graphmfg import models as M
from graphmfg import nash as N
from graphmfg.solver import picard_solve
from graphmfg.timegrid import Grid, GridFn

KW = dict(n_steps=512, tol=1e-10)


def constant_path(grid, value):
    return GridFn(grid, np.broadcast_to(value, (grid.n_half,) + np.shape(value)).copy())


@pytest.fixture(scope="module")
def k2():
    return G.path_graph(2)


@pytest.fixture(scope="module")
def oc_baseline(baseline_spec, baseline_mu):
    return N.optimal_control(baseline_spec, baseline_mu, **KW)


# ---------------------------------------------------------------------------
# rate matrices
# ---------------------------------------------------------------------------

def test_rate_matrix_drift_cancelling_gives_heat_chain(k2):
    """v = -grad log rho* cancels the drift: Q = omega off-diagonal."""
    grid = Grid(0.0, 1.0, 64)
    rho_vals = np.empty((grid.n_half, 2))
    rho_vals[:, 0] = 0.5 + 0.3 * np.exp(-2.0 * grid.half)
    rho_vals[:, 1] = 1.0 - rho_vals[:, 0]
    rho_fn = GridFn(grid, rho_vals)
    log_rho = np.log(rho_vals)
    v_vals = -(k2.sqrt_omega * (log_rho[:, :, None] - log_rho[:, None, :]))
    qpath = N.rate_matrix(k2, GridFn(grid, v_vals), rho_fn)
    assert qpath.admissible
    expect = np.array([[-1.0, 1.0], [1.0, -1.0]])
    assert np.max(np.abs(qpath.q.values - expect)) < 1e-12
    assert qpath.row_sum_defect() < 1e-13


def test_rate_matrix_uniform_stationary_zero_control(c4):
    grid = Grid(0.0, 1.0, 32)
    rho_fn = constant_path(grid, np.full(4, 0.25))
    v_fn = constant_path(grid, np.zeros((4, 4)))
    qpath = N.rate_matrix(c4, v_fn, rho_fn)
    off = qpath.q.values[0][c4.adjacency]
    assert np.allclose(off, 1.0)
    assert qpath.min_offdiag == 1.0


def test_rate_matrix_reports_violations(k2):
    grid = Grid(0.0, 1.0, 16)
    rho_fn = constant_path(grid, np.array([0.5, 0.5]))
    v_fn = constant_path(grid, k2.edge_field([5.0]))  # strong drift: Q < 0
    qpath = N.rate_matrix(k2, v_fn, rho_fn)
    assert not qpath.admissible
    assert qpath.min_offdiag < 0.0
    assert qpath.violations and qpath.violations[0]["edge"] == [1, 2]


# ---------------------------------------------------------------------------
# propagators
# ---------------------------------------------------------------------------

def test_propagator_zero_generator_is_identity(c4):
    grid = Grid(0.0, 1.0, 32)
    qpath = N.RateMatrixPath(grid, constant_path(grid, np.zeros((4, 4))), 0.0)
    psi = N.propagator(qpath, 0.0)
    assert np.max(np.abs(psi.values - np.eye(4))) == 0.0


def test_propagator_constant_q_matches_expm(c4):
    grid = Grid(0.0, 1.0, 256)
    rho_fn = constant_path(grid, np.full(4, 0.25))
    v_fn = constant_path(grid, np.zeros((4, 4)))
    qpath = N.rate_matrix(c4, v_fn, rho_fn)
    psi = N.propagator(qpath, 0.0)
    q0 = qpath.q.values[0]
    for s in (0.25, 0.5, 1.0):
        assert np.max(np.abs(psi(s) - expm(s * q0))) < 1e-10


def test_propagator_rows_and_chapman_kolmogorov(oc_baseline):
    oc = oc_baseline
    psi = N.propagator(oc.rate, 0.0)
    assert np.max(np.abs(psi.values.sum(axis=2) - 1.0)) < 1e-10
    assert psi.values.min() > -1e-10 and psi.values.max() < 1.0 + 1e-10
    grid = oc.solution.grid
    mid = float(grid.nodes[grid.n_steps // 2])
    psi_mid = N.propagator(oc.rate, mid)
    compose = psi(mid) @ psi_mid.terminal()
    assert np.max(np.abs(psi.terminal() - compose)) < 1e-8


def test_consistency_heat_chain(k2):
    """The chain flow of the drift-cancelling control reproduces the heat
    flow exactly."""
    grid = Grid(0.0, 1.0, 512)
    rho_vals = np.empty((grid.n_half, 2))
    rho_vals[:, 0] = 0.5 + 0.4 * np.exp(-2.0 * grid.half)
    rho_vals[:, 1] = 1.0 - rho_vals[:, 0]
    rho_fn = GridFn(grid, rho_vals)
    log_rho = np.log(rho_vals)
    v_vals = -(k2.sqrt_omega * (log_rho[:, :, None] - log_rho[:, None, :]))
    gap = N.consistency_check(k2, GridFn(grid, v_vals), rho_fn)
    assert gap < 1e-10


def test_consistency_stationary_uniform(c4):
    grid = Grid(0.0, 1.0, 64)
    rho_fn = constant_path(grid, np.full(4, 0.25))
    v_fn = constant_path(grid, np.zeros((4, 4)))
    assert N.consistency_check(c4, v_fn, rho_fn) < 1e-12


def test_consistency_mfg_optimal(baseline_spec, oc_baseline):
    """The equilibrium pair satisfies the weighted continuity equation, so
    its own chain flow must reproduce rho."""
    gap = N.consistency_check(baseline_spec.graph, oc_baseline.v, oc_baseline.rho)
    assert gap < 1e-6


# ---------------------------------------------------------------------------
# the equilibrium control
# ---------------------------------------------------------------------------

def test_optimal_control_quadratic_velocity(oc_baseline, baseline_spec):
    """Quadratic family: vbar = p = -grad u along the flow."""
    oc = oc_baseline
    p = -oc.solution.grad_phi()
    assert np.max(np.abs(oc.vbar.values - p)) < 1e-14
    assert oc.rate.admissible
    assert oc.rate.min_offdiag > 0.9


def test_optimal_control_symmetric_instance(c4):
    """A swap-symmetric initial measure yields an antisymmetric control."""
    spec = M.make_game(c4)
    mu = np.array([0.3, 0.2, 0.3, 0.2])
    oc = N.optimal_control(spec, mu, **KW)
    # the graph automorphism (1 3)(2 4) maps the data to itself
    perm = np.array([2, 3, 0, 1])
    v = oc.v.values
    v_perm = v[:, perm][:, :, perm]
    assert np.max(np.abs(v - v_perm)) < 1e-9


# ---------------------------------------------------------------------------
# costs: exact cases and Monte Carlo
# ---------------------------------------------------------------------------

def test_cost_ode_constant_terminal_no_running(baseline_spec, oc_baseline):
    """With L == 0 and g == c the cost is c regardless of the chain."""
    oc = oc_baseline
    grid = oc.rate.grid
    qv = oc.rate.q.values
    z = GridFn(grid, np.zeros((grid.n_half, 4)))

    from graphmfg.timegrid import rk4_backward
    const = 3.7 * np.ones(4)
    out = rk4_backward(grid, const, lambda j, y: -(qv[j] @ y))
    assert np.max(np.abs(out.initial() - 3.7)) < 1e-12
    _ = z


def test_cost_ode_frozen_chain(c4):
    """Q == 0 freezes the start state: J = g_i + int L_i ds."""
    spec = M.make_game(c4)
    grid = Grid(0.0, 1.0, 128)
    mu = np.full(4, 0.25)
    rho_fn = constant_path(grid, mu)
    # vbar = 2 sqrt(omega) / 1 makes Q = omega - sqrt(omega) * (1/2) * vbar = 0
    vbar = 2.0 * c4.sqrt_omega * c4.adjacency
    v_vals = np.where(c4.adjacency, vbar, 0.0)  # grad log uniform = 0
    v_fn = constant_path(grid, v_vals)
    qpath = N.rate_matrix(c4, v_fn, rho_fn)
    assert np.max(np.abs(qpath.q.values)) < 1e-14
    j = N.cost_J_ode(spec, qpath, rho_fn, v_fn, 0.0)
    l_vec = M.running_cost_L(spec, mu, v_vals)
    expect = M.g_map(spec, mu) + l_vec  # T = 1
    assert np.max(np.abs(j - expect)) < 1e-12


def test_mc_heat_chain_matches_propagator(k2):
    """Uniformized sampling of the two-state heat chain against the exact
    transition kernel, terminal payoff g = (1, 0)."""
    grid = Grid(0.0, 1.0, 64)
    rho_fn = constant_path(grid, np.array([0.5, 0.5]))
    v_fn = constant_path(grid, np.zeros((2, 2)))
    qpath = N.rate_matrix(k2, v_fn, rho_fn)   # heat chain: Q = [[-1,1],[1,-1]]
    g_term = np.array([1.0, 0.0])
    kernel = expm(qpath.q.values[0])           # time homogeneous over [0, 1]
    for start in (0, 1):
        sample = N.sample_chain_batch(qpath, start, 40000, seed=5 + start)
        ends = sample.states_at_end()
        mean = float(np.mean(g_term[ends]))
        err = float(np.std(g_term[ends], ddof=1) / np.sqrt(len(ends)))
        expect = float(kernel[start] @ g_term)
        assert abs(mean - expect) < 4.0 * err


def test_mc_seed_determinism(baseline_spec, oc_baseline):
    oc = oc_baseline
    a = N.cost_J_mc(baseline_spec, oc.rate, oc.rho, oc.v, 0.0,
                    n_paths=3000, seed=99)
    b = N.cost_J_mc(baseline_spec, oc.rate, oc.rho, oc.v, 0.0,
                    n_paths=3000, seed=99)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    c = N.cost_J_mc(baseline_spec, oc.rate, oc.rho, oc.v, 0.0,
                    n_paths=3000, seed=100)
    assert not np.array_equal(a[0], c[0])


def test_mc_stderr_clt_scaling(baseline_spec, oc_baseline):
    oc = oc_baseline
    errs = []
    for n in (1000, 10000, 100000):
        _, e = N.cost_J_mc(baseline_spec, oc.rate, oc.rho, oc.v, 0.0,
                           n_paths=n, seed=17)
        errs.append(float(np.mean(e)))
    for k in (0, 1):
        ratio = errs[k] / errs[k + 1]
        assert 2.2 < ratio < 4.5  # sqrt(10) ~ 3.16


def test_mc_agrees_with_ode(baseline_spec, oc_baseline):
    oc = oc_baseline
    j_ode = N.cost_J_ode(baseline_spec, oc.rate, oc.rho, oc.v, 0.0)
    means, errs = N.cost_J_mc(baseline_spec, oc.rate, oc.rho, oc.v, 0.0,
                              n_paths=100000, seed=23)
    z = np.abs(means - j_ode) / errs
    assert np.max(z) < 3.0


# ---------------------------------------------------------------------------
# martingale probe
# ---------------------------------------------------------------------------

def test_martingale_constant_function(oc_baseline):
    grid = oc_baseline.rate.grid
    f_fn = constant_path(grid, 2.5 * np.ones(4))
    sample = N.sample_chain_batch(oc_baseline.rate, 0, 2000, seed=31)
    probe = N.martingale_probe(sample, oc_baseline.rate, f_fn)
    assert abs(probe["mean"]) < 1e-12
    assert probe["identity_gap"] < 1e-12


def test_martingale_zero_generator(c4):
    spec = M.make_game(c4)
    grid = Grid(0.0, 1.0, 32)
    qpath = N.RateMatrixPath(grid, constant_path(grid, np.zeros((4, 4))), 0.0)
    f_vals = np.sin(grid.half)[:, None] * np.arange(1.0, 5.0)[None, :]
    sample = N.sample_chain_batch(qpath, 1, 500, seed=32)
    probe = N.martingale_probe(sample, qpath, GridFn(grid, f_vals))
    assert probe["mean"] == 0.0  # no jumps: M vanishes pathwise
    assert probe["identity_gap"] < 1e-12


def test_martingale_value_function(baseline_spec, oc_baseline):
    """f = u(s, rho_s) along the equilibrium chain: E int (f, dM) = 0."""
    sample = N.sample_chain_batch(oc_baseline.rate, 0, 20000, seed=33)
    probe = N.martingale_probe(sample, oc_baseline.rate, oc_baseline.solution.phi)
    assert probe["z"] < 4.0
    assert probe["identity_gap"] < 1e-8


# ---------------------------------------------------------------------------
# deviations and the certificate
# ---------------------------------------------------------------------------

def test_deviation_field_structure(c4):
    rng = np.random.default_rng(64)
    v = M.random_edge_field(rng, c4)
    a = np.array([0.0, 0.3, 0.0, -0.2])
    out = N.deviation_field(c4, v, 0, a)
    assert out[0, 1] == v[0, 1] + 0.3
    assert out[1, 0] == -(v[0, 1] + 0.3)
    assert out[0, 3] == v[0, 3] - 0.2
    assert out[1, 2] == v[1, 2]  # untouched edge
    assert np.max(np.abs(out + out.T)) == 0.0
    # a = 0 leaves the control unchanged
    assert np.array_equal(N.deviation_field(c4, v, 2, np.zeros(4)), v)


def test_zero_deviation_zero_gap(baseline_spec, oc_baseline):
    oc = oc_baseline
    j_star = N.cost_J_ode(baseline_spec, oc.rate, oc.rho, oc.v, 0.0)
    v_dev = GridFn(oc.solution.grid,
                   N.deviation_field(baseline_spec.graph, oc.v.values, 1,
                                     np.zeros(4)))
    rate_dev = N.rate_matrix(baseline_spec.graph, v_dev, oc.rho)
    j_dev = N.cost_J_ode(baseline_spec, rate_dev, oc.rho, v_dev, 0.0)
    assert np.max(np.abs(j_dev - j_star)) < 1e-12


def test_nash_certificate_baseline(baseline_spec, baseline_mu):
    cert = N.nash_certificate(baseline_spec, baseline_mu, n_mc=20000, seed=7,
                              **KW)
    assert cert["status"] == "CHECKED"
    assert cert["admissible"]
    assert cert["equality_gap"] < 1e-5
    assert cert["min_gap"] >= -1e-8
    assert cert["min_full_gap"] >= -1e-8
    assert cert["mc"]["max_z_vs_ode"] < 3.0
    assert cert["skipped_inadmissible"] == 0


def test_certificate_gap_quadratic_growth(baseline_spec, baseline_mu):
    """Deviation cost grows like |a|^2 near the equilibrium."""
    cert = N.nash_certificate(baseline_spec, baseline_mu,
                              magnitudes=(0.05, 0.1), n_random_dirs=0,
                              n_mc=0, time_modulated=0, seed=1, **KW)
    by_key = {}
    for gap in cert["deviation_gaps"]:
        by_key.setdefault((gap["vertex"], round(gap["a_norm"] / gap["a_scale"], 6)),
                          {})[gap["a_scale"]] = gap["gap"]
    ratios = []
    for pair in by_key.values():
        if 0.05 in pair and 0.1 in pair and pair[0.05] > 1e-12:
            ratios.append(pair[0.1] / pair[0.05])
    assert ratios and all(2.5 < r < 6.0 for r in ratios)


def test_nash_certificate_not_applicable(k2):
    """A short-horizon instance with a much stronger coupling can push the
    equilibrium control out of admissibility; the certificate must report,
    not fail.  (If the instance is admissible the certificate still checks.)"""
    spec = M.make_game(k2, c_f=1.0, c_t=5.0, horizon=0.25)
    mu = np.array([0.9, 0.1])
    cert = N.nash_certificate(spec, mu, n_mc=0, seed=3, n_steps=256, tol=1e-9,
                              use_homotopy=True, lambda_steps=4)
    assert cert["status"] == "NOT-APPLICABLE"
    assert not cert["admissible"]
    assert cert["violations"]
    assert {"t", "edge", "q"} <= set(cert["violations"][0])


def test_torus_admissibility_sweep():
    sweep = N.torus_admissibility_sweep(sizes=(4, 8), tol=1e-9)
    assert [e["n"] for e in sweep] == [4, 8]
    assert all(e["admissible"] for e in sweep)
    assert sweep[1]["margin"] > sweep[0]["margin"]


def test_paths_csv_dump(tmp_path, oc_baseline):
    sample = N.sample_chain_batch(oc_baseline.rate, 0, 5, seed=41)
    path = tmp_path / "paths.csv"
    N.dump_paths_csv(sample, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "path,t_jump,vertex"
    assert len(lines) >= 6
