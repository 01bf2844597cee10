"""Value function u(t, mu) of the forward-backward system, its simplex
derivatives, the individual-noise operator, and the residual of the vector
master equation

    dt u^i - (grad_W u^i, B(mu, grad u)) + ind_noise u^i
           - H^i(mu, grad u) + lap u^i = 0,        u(T, .) = g.

``u(t, mu)`` is the initial costate of the converged solve; its tangent
derivative comes either from the shooting linearization (one operator, one
sweep per direction) or from projected central differences along simplex
tangent steps, and the two routes cross-validate each other.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import models, solver
from .graphs import WeightedGraph, div, edge_inner, grad, laplacian
from .models import GameSpec
from .solver import MFGSolution, ShootingOperator, picard_solve

__all__ = [
    "ValueSample",
    "value",
    "solve_value",
    "tangent_basis",
    "dmu_value",
    "wasserstein_grad",
    "individual_noise",
    "time_derivative",
    "master_residual",
    "trajectory_consistency",
    "value_sample",
    "dump_residual_sweep_csv",
]


@dataclass
class ValueSample:
    """u, its tangent derivative and time derivative at one (t, mu).

    ``dmu_u[i, j]`` is the derivative of component u^j w.r.t. mu^i after
    tangent projection, so every column lies in the zero-sum hyperplane.
    """

    t: float
    mu: np.ndarray
    u: np.ndarray
    dmu_u: np.ndarray
    dt_u: np.ndarray
    provenance: str


def solve_value(spec: GameSpec, t: float, mu, **kw) -> MFGSolution:
    return picard_solve(spec, t, mu, lam=1.0, **kw)


def value(spec: GameSpec, t: float, mu, base: MFGSolution | None = None, **kw) -> np.ndarray:
    """u(t, mu): initial costate for t < T, the terminal map g at t = T."""
    if t >= spec.horizon:
        return models.g_map(spec, np.asarray(mu, dtype=float))
    if base is not None:
        return base.phi.initial()
    return solve_value(spec, t, mu, **kw).phi.initial()


def tangent_basis(g: WeightedGraph) -> list:
    """Spanning-tree edge directions (e_i - e_j)/sqrt(2): they span the
    tangent space and keep stepped points interior longest."""
    basis = []
    for i, j in g.spanning_tree_edges():
        nu = np.zeros(g.n)
        nu[i] = 1.0 / np.sqrt(2.0)
        nu[j] = -1.0 / np.sqrt(2.0)
        basis.append(nu)
    return basis


def _assemble_from_directional(g: WeightedGraph, dirs, vals) -> np.ndarray:
    """Recover the projected derivative matrix from directional derivatives.

    Solves nu_k . D[:, j] = vals[k][j] together with the zero-column-sum
    constraint; D[i, j] = d u^j / d mu^i.
    """
    n = g.n
    a = np.vstack(dirs + [np.ones(n) / n])
    width = np.shape(vals[0])[0]
    rhs = np.vstack(vals + [np.zeros(width)])
    return np.linalg.solve(a, rhs)


def dmu_value(spec: GameSpec, t: float, mu, method: str = "shooting",
              h_mu: float = 1e-4, base: MFGSolution | None = None,
              **kw) -> np.ndarray:
    """Tangent derivative array of u(t, .) at mu; columns sum to zero.

    ``shooting`` differentiates through the solver linearization;
    ``fd`` takes projected central differences with simplex-tangent steps,
    automatically shrinking the step when mu +/- h nu leaves the interior.
    """
    g = spec.graph
    mu = np.asarray(mu, dtype=float)
    if t >= spec.horizon:
        # terminal identity: projected Jacobian of g
        jac = spec.terminal.jacobian(mu)
        return jac - jac.mean(axis=0, keepdims=True)
    dirs = tangent_basis(g)
    if method == "shooting":
        if base is None:
            base = solve_value(spec, t, mu, **kw)
        op = ShootingOperator(base)
        vals = [op.solve(nu).psi.initial() for nu in dirs]
    elif method == "fd":
        if base is None:
            base = solve_value(spec, t, mu, **kw)
        phi0 = base.phi.values
        n_steps = base.grid.n_steps
        vals = []
        for nu in dirs:
            h = h_mu
            while np.any(mu + h * nu <= models.INTERIOR_EPS) or \
                    np.any(mu - h * nu <= models.INTERIOR_EPS):
                h *= 0.5
                if h < 1e-12:
                    raise ValueError("cannot stay interior along tangent step")
            warm = {**kw, "n_steps": n_steps, "phi0": phi0}
            up = picard_solve(spec, t, mu + h * nu, **warm).phi.initial()
            dn = picard_solve(spec, t, mu - h * nu, **warm).phi.initial()
            vals.append((up - dn) / (2.0 * h))
    else:
        raise ValueError("method must be 'shooting' or 'fd'")
    return _assemble_from_directional(g, dirs, vals)


def wasserstein_grad(g: WeightedGraph, dmu_row) -> np.ndarray:
    """Edge-field gradient of one component's tangent derivative."""
    return grad(g, np.asarray(dmu_row, dtype=float))


def individual_noise(g: WeightedGraph, mu, grad_w) -> float:
    """(div grad_W, mu); equals -(grad_W, grad mu) and the mobility-weighted
    form against grad log mu, which the tests cross-check."""
    return float(div(g, np.asarray(grad_w, dtype=float)) @ np.asarray(mu, dtype=float))


def time_derivative(spec: GameSpec, t: float, mu, h_t: float | None = None,
                    base: MFGSolution | None = None, **kw) -> tuple:
    """dt u by second-order differences of re-solves sharing the step count.

    Returns (dt_u, scheme) where scheme records whether the stencil was
    centered or one-sided (clamped near t = 0 or t = T).
    """
    T = spec.horizon
    if h_t is None:
        h_t = 1e-3 * T
    mu = np.asarray(mu, dtype=float)
    if base is None:
        base = solve_value(spec, t, mu, **kw)
    n_steps = base.grid.n_steps
    phi0 = base.phi.values

    warm = {**kw, "n_steps": n_steps, "phi0": phi0}

    def u_at(s):
        if s >= T:
            return models.g_map(spec, mu)
        return picard_solve(spec, s, mu, **warm).phi.initial()

    if t - h_t >= 0.0 and t + h_t < T:
        dt_u = (u_at(t + h_t) - u_at(t - h_t)) / (2.0 * h_t)
        return dt_u, "centered"
    if t + h_t >= T:
        dt_u = (3.0 * u_at(t) - 4.0 * u_at(t - h_t) + u_at(t - 2.0 * h_t)) / (2.0 * h_t)
        return dt_u, "one-sided-left"
    dt_u = (-3.0 * u_at(t) + 4.0 * u_at(t + h_t) - u_at(t + 2.0 * h_t)) / (2.0 * h_t)
    return dt_u, "one-sided-right"


def master_residual(spec: GameSpec, t: float, mu, h_t: float | None = None,
                    h_mu: float = 1e-4, base: MFGSolution | None = None,
                    **kw) -> np.ndarray:
    """Master-equation defect vector at (t, mu).

    dt u comes from re-solves at the shifted times, the Wasserstein gradient
    from the shooting linearization; the defect magnitude is O(h_t^2) plus
    the solver tolerance.
    """
    g = spec.graph
    mu = np.asarray(mu, dtype=float)
    if base is None:
        base = solve_value(spec, t, mu, **kw)
    u = base.phi.initial()
    dmu_u = dmu_value(spec, t, mu, method="shooting", base=base, **kw)
    dt_u, _ = time_derivative(spec, t, mu, h_t=h_t, base=base, **kw)
    grad_u = grad(g, u)
    b = models.B_map(spec, mu, grad_u)
    h_vec = models.H_map(spec, mu, grad_u)
    lap_u = laplacian(g, u)
    res = np.empty(g.n)
    for i in range(g.n):
        gw = wasserstein_grad(g, dmu_u[:, i])
        res[i] = (dt_u[i] - edge_inner(gw, b) + individual_noise(g, mu, gw)
                  - h_vec[i] + lap_u[i])
    return res


def trajectory_consistency(spec: GameSpec, t: float, mu, n_samples: int = 4,
                           **kw) -> float:
    """max over sampled s of |u(s, rho(s)) - phi(s)|: the value function
    evaluated along the solved flow must reproduce the costate."""
    base = solve_value(spec, t, mu, **kw)
    n_steps = base.grid.n_steps
    ks = np.unique(np.linspace(1, n_steps - 1, n_samples).astype(int))
    worst = 0.0
    for k in ks:
        s = float(base.grid.nodes[k])
        rho_s = base.rho.values[2 * k]
        sub = picard_solve(spec, s, rho_s,
                           **{**kw, "n_steps": n_steps - k,
                              "phi0": base.phi.values[2 * k:]})
        gap = float(np.max(np.abs(sub.phi.initial() - base.phi.values[2 * k])))
        worst = max(worst, gap)
    term = float(np.max(np.abs(models.g_map(spec, base.rho.terminal())
                               - base.phi.terminal())))
    return max(worst, term)


def value_sample(spec: GameSpec, t: float, mu, **kw) -> ValueSample:
    base = solve_value(spec, t, mu, **kw)
    u = base.phi.initial()
    dmu_u = dmu_value(spec, t, mu, base=base, **kw)
    dt_u, scheme = time_derivative(spec, t, mu, base=base, **kw)
    return ValueSample(t=t, mu=np.asarray(mu, dtype=float), u=u,
                       dmu_u=dmu_u, dt_u=dt_u, provenance=f"shooting/{scheme}")


def dump_residual_sweep_csv(path, rows) -> None:
    """rows: iterable of (t, mu, residual_vector); CSV with sup-norm column."""
    rows = list(rows)
    if not rows:
        return
    n = len(rows[0][1])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"mu_{i+1}" for i in range(n)]
                        + [f"residual_{i+1}" for i in range(n)] + ["norm"])
        for t, mu, res in rows:
            writer.writerow([f"{t:.17g}"] + [f"{x:.17g}" for x in mu]
                            + [f"{x:.17g}" for x in res]
                            + [f"{np.max(np.abs(res)):.17g}"])
