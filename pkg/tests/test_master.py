"""Value function and master-equation certification."""
import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from graphmfg import graphs as G
from graphmfg import master as ME
from graphmfg import models as M
from graphmfg import solver as S

KW = dict(n_steps=512, tol=1e-10)


def test_terminal_value_is_g(baseline_spec):
    rng = np.random.default_rng(50)
    for _ in range(100):
        mu = M.random_interior(rng, 4)
        got = ME.value(baseline_spec, baseline_spec.horizon, mu)
        assert np.max(np.abs(got - M.g_map(baseline_spec, mu))) == 0.0


def test_value_lambda_zero_oracle(c4, baseline_mu):
    """Decoupled value: heat flow + linear backward equation via scipy."""
    spec = M.make_game(c4, c_f=1.0, c_t=1.0, horizon=1.0)
    gen = c4.omega - np.diag(c4.degrees)

    def rho_exact(s, t0, mu):
        return expm((s - t0) * gen) @ mu

    t0 = 0.2
    sol = S.picard_solve(spec, t0, baseline_mu, lam=0.0, **KW)

    def rhs(tau, psi):
        rho_s = rho_exact(1.0 - tau, t0, baseline_mu)
        return -(spec.coupling.gradient(rho_s) - gen @ psi)

    ivp = solve_ivp(rhs, (0.0, 1.0 - t0),
                    spec.terminal.gradient(rho_exact(1.0, t0, baseline_mu)),
                    rtol=1e-12, atol=1e-14)
    assert np.max(np.abs(sol.phi.initial() - ivp.y[:, -1])) < 1e-10


def test_value_baseline_regression(baseline_spec, baseline_mu, baseline_solution):
    u = ME.value(baseline_spec, 0.0, baseline_mu, base=baseline_solution)
    assert np.max(np.abs(u - np.array(
        [0.53121425, 0.51899813, 0.48073607, 0.46817845]))) < 1e-6


# ---------------------------------------------------------------------------
# simplex derivative: dual routes
# ---------------------------------------------------------------------------

def test_dmu_value_terminal_identity(baseline_spec):
    rng = np.random.default_rng(51)
    mu = M.random_interior(rng, 4)
    d = ME.dmu_value(baseline_spec, baseline_spec.horizon, mu)
    # g = cT * mu projected onto the tangent space
    expect = baseline_spec.terminal.c * (np.eye(4) - np.full((4, 4), 0.25))
    assert np.max(np.abs(d - expect)) < 1e-14
    assert np.max(np.abs(d.sum(axis=0))) < 1e-14


def test_dmu_value_shooting_vs_fd(baseline_spec, baseline_mu, baseline_solution):
    d_sh = ME.dmu_value(baseline_spec, 0.0, baseline_mu, method="shooting",
                        base=baseline_solution, **KW)
    d_fd = ME.dmu_value(baseline_spec, 0.0, baseline_mu, method="fd",
                        h_mu=1e-4, base=baseline_solution, **KW)
    assert np.max(np.abs(d_sh.sum(axis=0))) < 1e-10
    assert np.max(np.abs(d_fd.sum(axis=0))) < 1e-10
    assert np.max(np.abs(d_sh - d_fd)) < max(1e-5, 10.0 * 1e-4 ** 2)


def test_dmu_value_directional_linearity(baseline_spec, baseline_solution):
    op = S.ShootingOperator(baseline_solution)
    rng = np.random.default_rng(52)
    nu1 = M.random_tangent(rng, 4)
    nu2 = M.random_tangent(rng, 4)
    lin = op.solve(nu1 + nu2)
    sep = op.solve(nu1).psi.initial() + op.solve(nu2).psi.initial()
    assert np.max(np.abs(lin.psi.initial() - sep)) < 1e-8


def test_dmu_value_bad_method(baseline_spec, baseline_mu):
    with pytest.raises(ValueError):
        ME.dmu_value(baseline_spec, 0.0, baseline_mu, method="autodiff")


# ---------------------------------------------------------------------------
# Wasserstein gradient and individual noise
# ---------------------------------------------------------------------------

def test_wasserstein_grad_of_squared_norm(c4):
    """For V = |mu|^2/2 the tangent derivative is the projected mu, whose
    graph gradient equals grad mu."""
    rng = np.random.default_rng(53)
    mu = M.random_interior(rng, 4)
    d = G.project_tangent(mu)
    assert np.max(np.abs(ME.wasserstein_grad(c4, d) - G.grad(c4, mu))) < 1e-14


def test_wasserstein_grad_linear_functional(c4):
    a = np.array([1.0, -2.0, 0.5, 0.5])
    d = G.project_tangent(a)
    assert np.max(np.abs(ME.wasserstein_grad(c4, d) - G.grad(c4, a))) < 1e-14
    # constant functional: zero gradient
    assert np.all(ME.wasserstein_grad(c4, G.project_tangent(np.ones(4))) == 0.0)


def test_individual_noise_three_forms(c4):
    rng = np.random.default_rng(54)
    for _ in range(100):
        mu = M.random_interior(rng, 4)
        d = M.random_tangent(rng, 4)
        gw = ME.wasserstein_grad(c4, d)
        first = ME.individual_noise(c4, mu, gw)
        second = -G.edge_inner(gw, G.grad(c4, mu))
        third = -G.rho_inner(c4, mu, gw, G.grad(c4, np.log(mu)))
        assert abs(first - second) < 1e-10 * (1.0 + abs(first))
        assert abs(first - third) < 1e-10 * (1.0 + abs(first))
    assert ME.individual_noise(c4, mu, np.zeros((4, 4))) == 0.0
    uniform = np.full(4, 0.25)
    assert abs(ME.individual_noise(c4, uniform, gw)
               + G.edge_inner(gw, G.grad(c4, uniform))) < 1e-15


# ---------------------------------------------------------------------------
# master residual
# ---------------------------------------------------------------------------

def test_master_residual_baseline(baseline_spec, baseline_mu):
    res = ME.master_residual(baseline_spec, 0.3, baseline_mu, **KW)
    assert np.max(np.abs(res)) < 1e-4


def test_master_residual_order_two(baseline_spec, baseline_mu):
    sups = []
    for h_t in (1e-2, 5e-3, 2.5e-3):
        res = ME.master_residual(baseline_spec, 0.3, baseline_mu, h_t=h_t, **KW)
        sups.append(np.max(np.abs(res)))
    assert 2.5 < sups[0] / sups[1] < 6.0
    assert 2.5 < sups[1] / sups[2] < 6.0


def test_master_residual_extended_flux(c4, baseline_mu):
    spec = M.make_game(c4, extended_beta=0.1)
    res = ME.master_residual(spec, 0.3, baseline_mu, **KW)
    assert np.max(np.abs(res)) < 1e-4


def test_time_derivative_clamps(baseline_spec, baseline_mu):
    _, scheme = ME.time_derivative(baseline_spec, 0.9995, baseline_mu,
                                   h_t=1e-3, **KW)
    assert scheme == "one-sided-left"
    _, scheme = ME.time_derivative(baseline_spec, 0.0, baseline_mu,
                                   h_t=1e-3, **KW)
    assert scheme == "one-sided-right"
    _, scheme = ME.time_derivative(baseline_spec, 0.5, baseline_mu,
                                   h_t=1e-3, **KW)
    assert scheme == "centered"


def test_trajectory_consistency(baseline_spec, baseline_mu):
    gap = ME.trajectory_consistency(baseline_spec, 0.0, baseline_mu, **KW)
    assert gap < 1e-6


def test_value_sample_assembly(baseline_spec, baseline_mu):
    vs = ME.value_sample(baseline_spec, 0.4, baseline_mu, **KW)
    assert vs.u.shape == (4,)
    assert vs.dmu_u.shape == (4, 4)
    assert np.max(np.abs(vs.dmu_u.sum(axis=0))) < 1e-10
    assert vs.provenance.startswith("shooting/")


def test_residual_sweep_csv(tmp_path, baseline_spec, baseline_mu):
    res = ME.master_residual(baseline_spec, 0.3, baseline_mu, **KW)
    path = tmp_path / "sweep.csv"
    ME.dump_residual_sweep_csv(path, [(0.3, baseline_mu, res)])
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("t,mu_1")
    assert lines[0].endswith("norm")
    assert len(lines) == 2
