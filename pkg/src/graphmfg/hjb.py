"""Action functional over continuity-equation paths, the value it defines on
the simplex, and certification of its Hamilton-Jacobi-Bellman equation

    -dt U + Ham(., -grad_W U) - ind_noise U + F = 0,     U(T, .) = U_T.

Two independent routes compute U(t, mu):

* ``value_by_fb``: solve the forward-backward characterization, reconstruct
  the minimizing pair (rho, m = D_p Ham(rho, -grad phi) - grad rho), and
  integrate the action by composite Simpson;
* ``value_by_direct_min``: transcribe the continuity constraint, treating
  midpoint fluxes as free variables and eliminating the density by forward
  recursion, then minimize by gradient descent with Barzilai-Borwein steps
  and Armijo backtracking; strict interiority is enforced by line-search
  rejection.

Their agreement, the gradient identity grad_W U = grad phi, convexity,
semiconcavity and the residual probes are the module's certification
surface.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import models
from .graphs import WeightedGraph, div, grad, theta_d1_mat, theta_mat
from .master import individual_noise, tangent_basis, _assemble_from_directional
from .models import GameSpec
from .solver import MFGSolution, picard_solve
from .timegrid import Grid, GridFn, simpson

__all__ = [
    "LineSearchStall",
    "ActionPath",
    "HJBValue",
    "make_action_path",
    "heat_flow_path",
    "action",
    "iota_bounds",
    "coercivity_constant",
    "value_by_fb",
    "value_by_direct_min",
    "gradient_identity_check",
    "hjb_residual",
    "convexity_probe",
    "semiconcavity_probe",
    "holder_ratio",
    "dump_action_path_csv",
]

PATH_FLOOR = 1e-10


class LineSearchStall(RuntimeError):
    """Armijo search could not descend; carries the best iterate found."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass
class ActionPath:
    """Discrete transcription path: densities at nodes, fluxes at midpoints.

    The discrete continuity identity rho[k+1] = rho[k] - ds * div m[k] holds
    by construction (the density is generated by that recursion).
    """

    grid: Grid
    rho: np.ndarray     # (N+1, n)
    m_mid: np.ndarray   # (N, n, n) skew edge fields

    @property
    def ds(self) -> float:
        return self.grid.dt

    def continuity_defect(self, g: WeightedGraph) -> float:
        flows = np.einsum("ij,kji->ki", g.sqrt_omega, self.m_mid)
        pred = self.rho[:-1] - self.ds * flows
        return float(np.max(np.abs(self.rho[1:] - pred)))

    def min_density(self) -> float:
        return float(self.rho.min())

    def feasible(self, floor: float = PATH_FLOOR) -> bool:
        return bool(self.rho.min() > floor)


@dataclass
class HJBValue:
    t: float
    mu: np.ndarray
    value: float
    grad_w: np.ndarray | None = None
    dt_value: float | None = None
    minimizer: ActionPath | None = None
    meta: dict = field(default_factory=dict)


def make_action_path(g: WeightedGraph, t: float, t1: float, mu,
                     m_mid: np.ndarray) -> ActionPath:
    m_mid = np.asarray(m_mid, dtype=float)
    grid = Grid(t, t1, m_mid.shape[0])
    rho = np.empty((grid.n_steps + 1, g.n))
    rho[0] = np.asarray(mu, dtype=float)
    flows = np.einsum("ij,kji->ki", g.sqrt_omega, m_mid)  # div m at midpoints
    rho[1:] = rho[0] - grid.dt * np.cumsum(flows, axis=0)
    return ActionPath(grid, rho, m_mid)


def heat_flow_path(spec: GameSpec, t: float, mu, n_steps: int) -> ActionPath:
    """Feasible reference path: explicit heat steps with m = -grad rho.

    Its transport term vanishes up to discretization, so the action is close
    to the upper-bound value -int F along the heat flow.
    """
    g = spec.graph
    grid = Grid(t, spec.horizon, n_steps)
    rho = np.asarray(mu, dtype=float).copy()
    m_mid = np.empty((n_steps, g.n, g.n))
    for k in range(n_steps):
        m_mid[k] = -grad(g, rho)
        rho = rho - grid.dt * div(g, m_mid[k])
    return make_action_path(g, t, spec.horizon, mu, m_mid)


# ---------------------------------------------------------------------------
# action and bounds
# ---------------------------------------------------------------------------

def _action_terms(spec: GameSpec, path: ActionPath):
    """Vectorized per-interval pieces shared by the objective and gradient.

    Returns (rho_mid, w, theta, ok) with w = (m + grad rho_mid)/theta on
    edges; ok = False flags an infeasible (non-interior) density.
    """
    g = spec.graph
    rho_mid = 0.5 * (path.rho[:-1] + path.rho[1:])
    if rho_mid.min() <= PATH_FLOOR or path.rho.min() <= PATH_FLOOR:
        return rho_mid, None, None, False
    th = theta_mat(g, rho_mid)
    grad_rho = g.sqrt_omega * (rho_mid[:, :, None] - rho_mid[:, None, :])
    m_tot = path.m_mid + grad_rho
    w = np.where(g.adjacency, m_tot / np.where(g.adjacency, th, 1.0), 0.0)
    return rho_mid, w, th, True


def action(spec: GameSpec, path: ActionPath) -> float:
    """Composite-midpoint quadrature of the running cost along the path;
    +inf when the kinetic term is extended-valued (or the density leaves
    the interior, which the minimizer treats as infeasible)."""
    rho_mid, w, th, ok = _action_terms(spec, path)
    if not ok:
        return float("inf")
    kinetic = 0.5 * np.sum(th * spec.model.l(w), axis=(1, 2))
    f_vals = -0.5 * spec.coupling.c * np.einsum("ki,ki->k", rho_mid, rho_mid)
    return float(path.ds * np.sum(kinetic - f_vals))


def objective(spec: GameSpec, path: ActionPath) -> float:
    """Action plus terminal cost (the quantity the direct route minimizes)."""
    a = action(spec, path)
    if not np.isfinite(a):
        return a
    return a + spec.terminal.value(path.rho[-1])


def coercivity_constant(spec: GameSpec) -> float:
    """A valid constant C with L(mu, m) >= C(|m|_2^p0 - 1) on the simplex.

    theta <= 1 on the simplex gives the edgewise bound l(m/theta)*theta >=
    |m|^p0/p0; for p0 > 2 the l2-lp comparison over the 2|E| directed entries
    costs the usual K^(1 - p0/2) factor.
    """
    p0 = spec.model.p0
    k_entries = 2 * spec.graph.n_edges
    base = 1.0 / (2.0 * p0)
    if p0 <= 2.0:
        return base
    return base * k_entries ** (1.0 - 0.5 * p0)


def iota_bounds(spec: GameSpec, t: float) -> tuple:
    """A priori value bounds (iota_0, iota_T) from the cost data on [t, T]."""
    span = spec.horizon - t
    max_abs_f = 0.5 * spec.coupling.c      # sup over the simplex of |F|
    max_ut = 0.5 * spec.terminal.c         # sup of U_T; U_T >= 0 so U_T^- = 0
    iota0 = -0.0 - span * max_abs_f - span * coercivity_constant(spec)
    iota_t = span * max_abs_f + max_ut
    return iota0, iota_t


# ---------------------------------------------------------------------------
# forward-backward route
# ---------------------------------------------------------------------------

def _require_variational(spec: GameSpec):
    if spec.extended_beta != 0.0:
        raise ValueError("the action value is defined for the variational flux "
                         "(extended_beta = 0)")


def value_by_fb(spec: GameSpec, t: float, mu, n_steps: int | None = None,
                base: MFGSolution | None = None, **kw) -> HJBValue:
    """Value along the forward-backward characterization of the minimizer."""
    _require_variational(spec)
    g = spec.graph
    mu = np.asarray(mu, dtype=float)
    if t >= spec.horizon:
        return HJBValue(t=t, mu=mu, value=spec.terminal.value(mu),
                        grad_w=grad(g, spec.terminal.gradient(mu)))
    sol = base if base is not None else picard_solve(spec, t, mu, n_steps=n_steps, **kw)
    rho_half = sol.rho.values
    p_half = -sol.grad_phi()                       # costate: p = -grad phi
    th = theta_mat(g, rho_half)
    hp = np.where(g.adjacency, spec.model.h_prime(p_half), 0.0)
    # m + grad rho = D_p Ham(rho, p); kinetic integrand evaluated without
    # dividing by theta: L(rho, D_p Ham) = 0.5 sum th * l(h'(p))
    kinetic = 0.5 * np.sum(
        th * np.where(g.adjacency, spec.model.l(hp), 0.0), axis=(1, 2))
    coupling = -0.5 * spec.coupling.c * np.einsum("ji,ji->j", rho_half, rho_half)
    value = float(simpson(sol.grid, kinetic - coupling)
                  + spec.terminal.value(sol.rho.terminal()))
    grad_rho = g.sqrt_omega * (rho_half[:, :, None] - rho_half[:, None, :])
    m_half = th * hp - grad_rho
    minimizer = make_action_path(g, t, spec.horizon, mu, m_half[1::2])
    return HJBValue(t=t, mu=mu, value=value, grad_w=sol.grad_phi()[0],
                    minimizer=minimizer,
                    meta={"solution": sol, "m_half": m_half})


# ---------------------------------------------------------------------------
# direct-minimization route
# ---------------------------------------------------------------------------

def _pack(g: WeightedGraph, m_mid: np.ndarray) -> np.ndarray:
    idx = np.array(g.edges)
    return m_mid[:, idx[:, 0], idx[:, 1]].ravel()


def _unpack(g: WeightedGraph, x: np.ndarray, n_steps: int) -> np.ndarray:
    idx = np.array(g.edges)
    vals = x.reshape(n_steps, g.n_edges)
    m = np.zeros((n_steps, g.n, g.n))
    m[:, idx[:, 0], idx[:, 1]] = vals
    m[:, idx[:, 1], idx[:, 0]] = -vals
    return m


def _objective_and_gradient(spec: GameSpec, t: float, mu, x: np.ndarray,
                            n_steps: int):
    """Objective and adjoint gradient of the transcription in packed form."""
    g = spec.graph
    m_mid = _unpack(g, x, n_steps)
    path = make_action_path(g, t, spec.horizon, mu, m_mid)
    rho_mid, w, th, ok = _action_terms(spec, path)
    if not ok:
        return float("inf"), None, path
    ds = path.ds
    model = spec.model
    adj = g.adjacency
    lw = model.l(w)
    lpw = model.l_prime(w)
    kinetic = 0.5 * np.sum(th * lw, axis=(1, 2))
    f_vals = -0.5 * spec.coupling.c * np.einsum("ki,ki->k", rho_mid, rho_mid)
    value = float(ds * np.sum(kinetic - f_vals) + spec.terminal.value(path.rho[-1]))

    # d/dm of the interval integrand (edge gradient), and d/drho_mid
    gm = np.where(adj, lpw, 0.0)
    th1 = theta_d1_mat(g, rho_mid)
    psi = np.where(adj, lw - w * lpw, 0.0)
    dmu_l = 0.5 * np.einsum("kij,kij->ki", th1, psi + psi.transpose(0, 2, 1))
    div_gm = np.einsum("ij,kji->ki", g.sqrt_omega, gm)
    g_rho = dmu_l - div_gm + spec.coupling.c * rho_mid  # includes -DF

    # adjoint sweep: lam[k] = dJ/drho[k] through the recursion
    lam = np.empty_like(path.rho)
    lam[-1] = spec.terminal.gradient(path.rho[-1]) + 0.5 * ds * g_rho[-1]
    half = 0.5 * ds * g_rho
    for k in range(n_steps - 1, 0, -1):
        lam[k] = half[k] + half[k - 1] + lam[k + 1]
    grad_lam = g.sqrt_omega * (lam[1:, :, None] - lam[1:, None, :])
    grad_m = ds * (gm + grad_lam)
    return value, _pack(g, grad_m), path


def value_by_direct_min(spec: GameSpec, t: float, mu, grid_n: int = 384,
                        max_iter: int = 50000, gtol: float = 1e-8,
                        ftol: float = 1e-13, warm_start=None,
                        **fb_kw) -> HJBValue:
    """Direct transcription minimum of action + terminal cost.

    ``warm_start`` may be "fb" (default: start from the forward-backward
    minimizer), "heat" (heat-flow reference path), or an explicit midpoint
    flux array of shape (grid_n, n, n).
    """
    _require_variational(spec)
    g = spec.graph
    mu = np.asarray(mu, dtype=float)
    grid = Grid(t, spec.horizon, grid_n)
    mids = grid.nodes[:-1] + 0.5 * grid.dt
    fb = None
    if warm_start is None or (isinstance(warm_start, str) and warm_start == "fb"):
        fb = value_by_fb(spec, t, mu, **fb_kw)
        m_fn = GridFn(fb.meta["solution"].grid, fb.meta["m_half"])
        m0 = m_fn(mids)
    elif isinstance(warm_start, str) and warm_start == "heat":
        m0 = heat_flow_path(spec, t, mu, grid_n).m_mid
    else:
        m0 = np.asarray(warm_start, dtype=float)
        if m0.shape != (grid_n, g.n, g.n):
            raise ValueError("warm start must be midpoint fluxes (grid_n, n, n)")

    x = _pack(g, m0)
    f, grad_x, path = _objective_and_gradient(spec, t, mu, x, grid_n)
    if not np.isfinite(f):
        raise ValueError("warm start is infeasible")
    step = 1.0 / max(1.0, float(np.linalg.norm(grad_x)))
    n_iter = 0
    stalled = False
    for n_iter in range(1, max_iter + 1):
        gnorm = float(np.max(np.abs(grad_x)))
        if gnorm <= gtol:
            break
        # Armijo backtracking on the steepest direction with BB warm step
        accepted = False
        s = step
        g2 = float(grad_x @ grad_x)
        for _ in range(60):
            x_new = x - s * grad_x
            f_new, grad_new, path_new = _objective_and_gradient(
                spec, t, mu, x_new, grid_n)
            if np.isfinite(f_new) and f_new <= f - 1e-4 * s * g2:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            stalled = True
            break
        dx = x_new - x
        dg = grad_new - grad_x
        sy = float(dx @ dg)
        step = float(dx @ dx) / sy if sy > 0.0 else 2.0 * s
        if abs(f - f_new) <= ftol * (1.0 + abs(f)) and float(np.max(np.abs(dx))) < 1e-12:
            x, f, grad_x, path = x_new, f_new, grad_new, path_new
            break
        x, f, grad_x, path = x_new, f_new, grad_new, path_new
    result = HJBValue(t=t, mu=mu, value=float(f), minimizer=path,
                      meta={"iterations": n_iter,
                            "grad_norm": float(np.max(np.abs(grad_x))),
                            "fb_value": None if fb is None else fb.value})
    if stalled and float(np.max(np.abs(grad_x))) > 1e2 * gtol:
        raise LineSearchStall(
            f"line search stalled at |grad| = {np.max(np.abs(grad_x)):.3e}",
            best=result)
    return result


# ---------------------------------------------------------------------------
# certification probes
# ---------------------------------------------------------------------------

def _fd_tangent_gradient(spec: GameSpec, s: float, mu, h_mu: float, **kw) -> np.ndarray:
    """delta_mu U(s, .) at mu via central differences along tangent basis."""
    g = spec.graph
    dirs = tangent_basis(g)
    vals = []
    base = value_by_fb(spec, s, mu, **kw)
    sol = base.meta.get("solution")
    warm = {} if sol is None else {"phi0": sol.phi.values, "n_steps": sol.grid.n_steps}
    for nu in dirs:
        h = h_mu
        while np.any(np.asarray(mu) + h * nu <= models.INTERIOR_EPS) or \
                np.any(np.asarray(mu) - h * nu <= models.INTERIOR_EPS):
            h *= 0.5
        up = value_by_fb(spec, s, np.asarray(mu) + h * nu, **{**kw, **warm}).value
        dn = value_by_fb(spec, s, np.asarray(mu) - h * nu, **{**kw, **warm}).value
        vals.append(np.array([(up - dn) / (2.0 * h)]))
    d = _assemble_from_directional(g, dirs, vals)
    return d[:, 0]


def gradient_identity_check(spec: GameSpec, t: float, mu, h_mu: float = 1e-4,
                            s_points: int = 2, **kw) -> float:
    """Max gap between grad(FD delta_mu U) and grad phi along the minimizer."""
    _require_variational(spec)
    g = spec.graph
    fb = value_by_fb(spec, t, mu, **kw)
    sol = fb.meta["solution"]
    ks = np.unique(np.linspace(0, sol.grid.n_steps // 2, s_points).astype(int))
    worst = 0.0
    for k in ks:
        s = float(sol.grid.nodes[k])
        mu_s = sol.rho.values[2 * k]
        d = _fd_tangent_gradient(spec, s, mu_s, h_mu, **kw)
        gw_fd = grad(g, d)
        gw_phi = g.sqrt_omega * (sol.phi.values[2 * k][:, None]
                                 - sol.phi.values[2 * k][None, :])
        worst = max(worst, float(np.max(np.abs(gw_fd - gw_phi))))
    return worst


def hjb_residual(spec: GameSpec, t: float, mu, h_t: float | None = None,
                 **kw) -> float:
    """Scalar defect -dt U + Ham(mu, -grad_W U) - ind_noise U + F(mu)."""
    _require_variational(spec)
    T = spec.horizon
    if h_t is None:
        h_t = 1e-3 * T
    mu = np.asarray(mu, dtype=float)
    fb = value_by_fb(spec, t, mu, **kw)
    sol = fb.meta["solution"]
    warm = {"phi0": sol.phi.values, "n_steps": sol.grid.n_steps}

    def u_of(s):
        if s >= T:
            return spec.terminal.value(mu)
        return value_by_fb(spec, s, mu, **{**kw, **warm}).value

    if t - h_t >= 0.0 and t + h_t < T:
        dt_u = (u_of(t + h_t) - u_of(t - h_t)) / (2.0 * h_t)
    elif t + h_t >= T:
        dt_u = (3.0 * u_of(t) - 4.0 * u_of(t - h_t) + u_of(t - 2.0 * h_t)) / (2.0 * h_t)
    else:
        dt_u = (-3.0 * u_of(t) + 4.0 * u_of(t + h_t) - u_of(t + 2.0 * h_t)) / (2.0 * h_t)
    gw = fb.grad_w
    ham = models.hamiltonian(spec, mu, -gw)
    noise = individual_noise(spec.graph, mu, gw)
    f_val = spec.coupling.value(mu)
    return float(-dt_u + ham - noise + f_val)


def convexity_probe(spec: GameSpec, t: float, samples: int = 20, seed: int = 0,
                    **kw) -> float:
    """Minimum chord margin s*U(mu0) + (1-s)*U(mu1) - U(mix) over random
    interior chords; strict convexity makes every margin positive."""
    _require_variational(spec)
    rng = np.random.default_rng(seed)
    n = spec.n
    worst = np.inf
    for _ in range(samples):
        mu0 = models.random_interior(rng, n)
        mu1 = models.random_interior(rng, n)
        lam = rng.uniform(0.2, 0.8)
        mix = lam * mu0 + (1.0 - lam) * mu1
        u0 = value_by_fb(spec, t, mu0, **kw).value
        u1 = value_by_fb(spec, t, mu1, **kw).value
        um = value_by_fb(spec, t, mix, **kw).value
        worst = min(worst, lam * u0 + (1.0 - lam) * u1 - um)
    return float(worst)


def semiconcavity_probe(spec: GameSpec, t: float, mu, h: float = 1e-3,
                        n_random: int = 4, seed: int = 0, **kw) -> float:
    """Max second difference [U(mu+h d)+U(mu-h d)-2U(mu)]/|h d|^2 over
    tangent directions; bounded ratios witness spatial semiconcavity."""
    _require_variational(spec)
    g = spec.graph
    rng = np.random.default_rng(seed)
    dirs = tangent_basis(g)
    for _ in range(n_random):
        d = models.random_tangent(rng, g.n)
        dirs.append(d / np.linalg.norm(d))
    u0 = value_by_fb(spec, t, mu, **kw).value
    worst = -np.inf
    for d in dirs:
        hh = h
        while np.any(np.asarray(mu) + hh * d <= models.INTERIOR_EPS) or \
                np.any(np.asarray(mu) - hh * d <= models.INTERIOR_EPS):
            hh *= 0.5
        up = value_by_fb(spec, t, np.asarray(mu) + hh * d, **kw).value
        dn = value_by_fb(spec, t, np.asarray(mu) - hh * d, **kw).value
        ratio = (up + dn - 2.0 * u0) / (hh * np.linalg.norm(d)) ** 2
        worst = max(worst, ratio)
    return float(worst)


def holder_ratio(spec: GameSpec, fb: HJBValue, n_pairs: int = 64) -> float:
    """Max over sampled node pairs of |rho(s2)-rho(s1)| divided by the
    Hoelder envelope |s2-s1|^(1/q0) * Lp0-norm of rho'; at most 1 up to
    quadrature error along minimizers."""
    sol: MFGSolution = fb.meta["solution"]
    grid = sol.grid
    rho = sol.rho
    p0 = spec.model.p0
    q0 = spec.model.q0
    # |rho'| in l2 on the half grid via the five-point reconstruction
    v = rho.values
    h2 = 0.5 * grid.dt
    dv = np.gradient(v, h2, axis=0, edge_order=2)
    speed = np.linalg.norm(dv, axis=1)
    lp_norm = float(simpson(grid, speed ** p0) ** (1.0 / p0))
    rng = np.random.default_rng(0)
    nodes = rho.node_values
    times = grid.nodes
    worst = 0.0
    for _ in range(n_pairs):
        k1, k2 = sorted(rng.choice(len(times), size=2, replace=False))
        if k1 == k2:
            continue
        gap = float(np.linalg.norm(nodes[k2] - nodes[k1]))
        env = (times[k2] - times[k1]) ** (1.0 / q0) * lp_norm
        if env > 0.0:
            worst = max(worst, gap / env)
    return worst


def dump_action_path_csv(g: WeightedGraph, path_obj: ActionPath, path) -> None:
    """CSV dump: s, rho_1..rho_n, then m_(i,j) columns for i<j edges."""
    labels = [f"m_({i+1},{j+1})" for i, j in g.edges]
    idx = np.array(g.edges)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s"] + [f"rho_{i+1}" for i in range(g.n)] + labels)
        nodes = path_obj.grid.nodes
        for k, s in enumerate(nodes):
            row = [f"{s:.17g}"] + [f"{x:.17g}" for x in path_obj.rho[k]]
            if k < path_obj.m_mid.shape[0]:
                mv = path_obj.m_mid[k, idx[:, 0], idx[:, 1]]
                row += [f"{x:.17g}" for x in mv]
            else:
                row += [""] * len(labels)
            writer.writerow(row)
