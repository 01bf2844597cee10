"""Damped Picard iteration, homotopy continuation and Newton shooting for the
extended forward-backward system

    phi'(s) = H(rho(s), lam * grad phi(s)) - lap phi(s)
    rho'(s) = div B(rho(s), lam * grad phi(s)) + lap rho(s)
    phi(T)  = g(rho(T)),   rho(t) = mu,

with lam in [0, 1] the homotopy parameter (lam = 1 is the game system).

One Picard sweep freezes the potential, integrates the density forward with
the frozen flux, then integrates the linear backward equation; iterates are
relaxed with an adaptive damping factor.  The convergence metric is the
undamped operator gap sup |T(phi) - phi| over the grid, which dominates the
damped successive gap.  On convergence the returned pair is (T(phi), rho),
so both equations hold up to O(dt^4) plus a Lipschitz multiple of the gap.

The linearization w.r.t. the initial measure is solved by single shooting on
the affine boundary-value map: the n homogeneous sweeps assemble the linear
part column by column, one dense solve recovers the missing initial costate.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import models
from ._kernels import HAVE_NUMBA, backward_potential_sweep, forward_density_sweep
from .dynamics import POSITIVITY_FLOOR, NonPositiveDensity, integrate_continuity
from .graphs import theta_d1_mat, theta_d11, theta_d12, theta_mat
from .models import GameSpec
from .timegrid import Grid, GridFn, midpoint_defect, rk4_backward, rk4_forward

__all__ = [
    "NoConvergence",
    "SingularShooting",
    "MFGSolution",
    "LinearizedSolution",
    "picard_solve",
    "homotopy_solve",
    "ShootingOperator",
    "linearized_solve",
    "lasry_lions_probe",
    "phi_bound_probe",
    "flow_property_check",
    "uniqueness_probe",
    "default_n_steps",
    "dump_solution_csv",
]

PICARD_TOL = 1e-9


class NoConvergence(RuntimeError):
    def __init__(self, lam, iterations, gap):
        super().__init__(
            f"Picard iteration did not converge at lambda={lam} "
            f"({iterations} iterations, last gap {gap:.3e}); reduce damping "
            "or use homotopy continuation")
        self.lam = lam
        self.iterations = iterations
        self.gap = gap


class SingularShooting(RuntimeError):
    """Shooting matrix numerically singular: monotonicity failure witness."""


def default_n_steps(spec: GameSpec, t0: float, t1: float) -> int:
    """Step count keeping lambda_max(lap) * dt small enough for RK4 accuracy.

    The Gershgorin bound 2*max weighted degree controls the stiffest mode;
    dt is sized so that rate*dt <= 0.15, with a floor of 512 steps.
    """
    rate = 2.0 * float(np.max(spec.graph.degrees))
    return max(512, int(np.ceil((t1 - t0) * rate / 0.15)))


@dataclass
class MFGSolution:
    spec: GameSpec
    t: float
    mu: np.ndarray
    lam: float
    phi: GridFn
    rho: GridFn
    iterations: int
    gap: float
    damping_final: float
    residual_phi: float = field(default=float("nan"))
    residual_rho: float = field(default=float("nan"))

    @property
    def grid(self) -> Grid:
        return self.phi.grid

    def terminal_gap(self) -> float:
        g_term = models.g_map(self.spec, self.rho.terminal())
        return float(np.max(np.abs(self.phi.terminal() - g_term)))

    def initial_density_gap(self) -> float:
        return float(np.max(np.abs(self.rho.initial() - self.mu)))

    def min_density(self) -> float:
        return float(self.rho.values.min())

    def grad_phi(self) -> np.ndarray:
        """lam-free potential gradient on the half-grid, shape (2N+1, n, n)."""
        sqw = self.spec.graph.sqrt_omega
        v = self.phi.values
        return sqw * (v[:, :, None] - v[:, None, :])

    def residual(self) -> float:
        return max(self.residual_phi, self.residual_rho)


def _grad_half(spec: GameSpec, values: np.ndarray) -> np.ndarray:
    return spec.graph.sqrt_omega * (values[:, :, None] - values[:, None, :])


def _ext_factors(spec: GameSpec, rho_half: np.ndarray) -> np.ndarray:
    if spec.extended_beta == 0.0:
        return np.ones(rho_half.shape[0])
    return 1.0 + spec.extended_beta * np.einsum("ji,ji->j", rho_half, rho_half)


def _backward_source(spec: GameSpec, rho_half: np.ndarray, p_half: np.ndarray) -> np.ndarray:
    """H(rho(s), p(s)) on the half-grid, vectorized over the time axis."""
    adj = spec.graph.adjacency
    th1 = theta_d1_mat(spec.graph, rho_half)
    hp = np.where(adj, spec.model.h(-p_half), 0.0)
    dmu_h = 0.5 * np.einsum("tij,tij->ti", th1, hp + hp.transpose(0, 2, 1))
    return dmu_h - spec.coupling.c * rho_half


class _FloorHit(Exception):
    pass


def _forward_density(spec: GameSpec, grid: Grid, mu, p_half: np.ndarray,
                     lam: float) -> GridFn:
    """Density sweep with flux B(rho, lam * grad phi) frozen in phi.

    Tries the fast indexed RK4 first; if any stage threatens the positivity
    floor, falls back to the rejection-halving integrator of `dynamics`.
    """
    g = spec.graph
    adj = g.adjacency
    hp_frozen = np.where(adj, spec.model.h_prime(-lam * p_half), 0.0)
    sqw = g.sqrt_omega
    omega = g.omega
    deg = g.degrees
    beta = spec.extended_beta

    if HAVE_NUMBA:
        ei, ej, sqw_e, om_e = _edge_arrays(g)
        hp_e = np.ascontiguousarray(hp_frozen[:, ei, ej])
        vals, ok = forward_density_sweep(
            np.ascontiguousarray(mu, dtype=float), grid.dt, grid.n_steps,
            ei, ej, sqw_e, om_e, hp_e, beta, POSITIVITY_FLOOR)
        if ok:
            return GridFn(grid, vals)
        return _forward_density_slow(spec, grid, mu, p_half, lam)

    def rhs(j, y):
        if y.min() <= POSITIVITY_FLOOR:
            raise _FloorHit
        th = theta_mat(g, y)
        b = -th * hp_frozen[j]
        if beta != 0.0:
            b = b * (1.0 + beta * float(y @ y))
        return np.einsum("ij,ji->i", sqw, b) + omega @ y - deg * y

    try:
        return rk4_forward(grid, mu, rhs)
    except _FloorHit:
        return _forward_density_slow(spec, grid, mu, p_half, lam)


def _forward_density_slow(spec: GameSpec, grid: Grid, mu, p_half, lam) -> GridFn:
    """Rejection-halving fallback for sweeps that threaten the floor."""
    g = spec.graph
    adj = g.adjacency
    beta = spec.extended_beta
    p_interp = GridFn(grid, p_half)  # frozen potential gradient

    def flux(s, y):
        th = theta_mat(g, y)
        b = -th * np.where(adj, spec.model.h_prime(-lam * p_interp(s)), 0.0)
        if beta != 0.0:
            b = b * (1.0 + beta * float(y @ y))
        return b

    traj = integrate_continuity(g, flux, mu, (grid.t0, grid.t1), grid.dt)
    return traj.fn


_EDGE_CACHE: dict = {}


def _edge_arrays(g) -> tuple:
    key = id(g)
    hit = _EDGE_CACHE.get(key)
    if hit is None:
        idx = np.array(g.edges, dtype=np.int64)
        ei = np.ascontiguousarray(idx[:, 0])
        ej = np.ascontiguousarray(idx[:, 1])
        sqw_e = np.ascontiguousarray(g.sqrt_omega[ei, ej])
        om_e = np.ascontiguousarray(g.omega[ei, ej])
        hit = (ei, ej, sqw_e, om_e)
        _EDGE_CACHE[key] = hit
    return hit


def picard_solve(spec: GameSpec, t: float, mu, lam: float = 1.0,
                 damping: float = 0.5, tol: float = PICARD_TOL,
                 max_iter: int = 400, n_steps: int | None = None,
                 phi0: np.ndarray | None = None) -> MFGSolution:
    """Fixed point of phi -> damping*T(phi) + (1-damping)*phi.

    ``phi0`` optionally seeds the iteration with half-grid potential values
    (shape (2*n_steps+1, n)); the default is the frozen terminal profile
    g(mu).  Damping shrinks geometrically when the gap grows twice in a row
    and relaxes back toward 1 while the iteration contracts steadily.
    """
    T = spec.horizon
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    if not t < T:
        raise ValueError(f"need t < horizon {T}")
    mu = np.asarray(mu, dtype=float)
    models._require_interior(mu, "initial measure")
    if n_steps is None:
        n_steps = default_n_steps(spec, t, T)
    grid = Grid(t, T, n_steps)
    if phi0 is None:
        phi_half = np.tile(models.g_map(spec, mu), (grid.n_half, 1))
    else:
        phi_half = np.asarray(phi0, dtype=float).copy()
        if phi_half.shape != (grid.n_half, spec.n):
            raise ValueError("phi0 must be half-grid potential values")

    gaps = []
    d = damping
    omega, deg = spec.graph.omega, spec.graph.degrees
    for it in range(1, max_iter + 1):
        p_half = _grad_half(spec, phi_half)
        rho_fn = _forward_density(spec, grid, mu, p_half, lam)
        src = _backward_source(spec, rho_fn.values, lam * p_half)
        g_term = models.g_map(spec, rho_fn.terminal())
        if HAVE_NUMBA:
            phi_fn = GridFn(grid, backward_potential_sweep(
                np.ascontiguousarray(g_term), grid.dt, grid.n_steps,
                omega, deg, src))
        else:
            def rhs_phi(j, y, _src=src):
                return _src[j] - (omega @ y - deg * y)

            phi_fn = rk4_backward(grid, g_term, rhs_phi)
        gap = float(np.max(np.abs(phi_fn.values - phi_half)))
        gaps.append(gap)
        if gap < tol:
            sol = MFGSolution(spec, t, mu, lam, phi_fn, rho_fn,
                              iterations=it, gap=gap, damping_final=d)
            _attach_residuals(sol)
            return sol
        if len(gaps) >= 3 and gaps[-1] > gaps[-2] > gaps[-3]:
            d = max(0.5 * d, 1.0 / 64.0)
        elif len(gaps) >= 3 and gaps[-1] < gaps[-2] < gaps[-3]:
            d = min(1.0, 1.3 * d)
        phi_half = d * phi_fn.values + (1.0 - d) * phi_half
    raise NoConvergence(lam, max_iter, gaps[-1])


def _attach_residuals(sol: MFGSolution) -> None:
    spec = sol.spec
    g = spec.graph
    rho_half = sol.rho.values
    p_half = sol.lam * sol.grad_phi()
    src = _backward_source(spec, rho_half, p_half)
    lap_phi = np.einsum("ij,tj->ti", g.omega, sol.phi.values) - g.degrees * sol.phi.values
    sol.residual_phi = midpoint_defect(sol.phi, src - lap_phi)
    adj = g.adjacency
    th = theta_mat(g, rho_half)
    b = -th * np.where(adj, spec.model.h_prime(-p_half), 0.0)
    b *= _ext_factors(spec, rho_half)[:, None, None]
    div_b = np.einsum("ij,tji->ti", g.sqrt_omega, b)
    lap_rho = np.einsum("ij,tj->ti", g.omega, rho_half) - g.degrees * rho_half
    sol.residual_rho = midpoint_defect(sol.rho, div_b + lap_rho)


def homotopy_solve(spec: GameSpec, t: float, mu, lambda_steps: int = 5,
                   **picard_kwargs) -> MFGSolution:
    """Continuation in lambda from 0 to 1 with warm-started Picard stages."""
    if lambda_steps < 1:
        raise ValueError("need at least one lambda step")
    phi0 = picard_kwargs.pop("phi0", None)
    sol = None
    for lam in np.linspace(0.0, 1.0, lambda_steps + 1)[1:]:
        sol = picard_solve(spec, t, mu, lam=float(lam), phi0=phi0, **picard_kwargs)
        phi0 = sol.phi.values
    return sol


# ---------------------------------------------------------------------------
# linearization: shooting on the affine boundary map
# ---------------------------------------------------------------------------

@dataclass
class LinearizedSolution:
    psi: GridFn
    eta: GridFn
    nu: np.ndarray
    condition: float

    def terminal_gap(self, spec: GameSpec, base: MFGSolution) -> float:
        want = models.dg_apply(spec, base.rho.terminal(), self.eta.terminal())
        return float(np.max(np.abs(self.psi.terminal() - want)))


class ShootingOperator:
    """Solves the linearized system for any initial tangent direction.

    Assembles the n homogeneous sweeps (psi(t) = e_k, eta(t) = 0) once; each
    direction nu then costs one particular sweep plus a dense solve, and the
    trajectory is recombined linearly from the stored sweeps.
    """

    def __init__(self, base: MFGSolution, cond_limit: float = 1e12):
        spec = base.spec
        g = spec.graph
        self.base = base
        self.spec = spec
        grid = base.grid
        rho_half = base.rho.values
        p_half = base.lam * base.grad_phi()
        adj = g.adjacency

        # frozen coefficient tensors along the base trajectory
        self._th = theta_mat(g, rho_half)
        self._th1 = theta_d1_mat(g, rho_half)
        r = rho_half[:, :, None]
        s = rho_half[:, None, :]
        ones = np.ones_like(r)
        self._th11 = np.where(adj, theta_d11(np.where(adj, r, ones), np.where(adj, s, ones)), 0.0)
        self._th12 = np.where(adj, theta_d12(np.where(adj, r, ones), np.where(adj, s, ones)), 0.0)
        self._h_at = np.where(adj, spec.model.h(-p_half), 0.0)
        self._hp_at = np.where(adj, spec.model.h_prime(-p_half), 0.0)
        self._hpp_at = np.where(adj, spec.model.h_second(-p_half), 0.0)
        self._ext = _ext_factors(spec, rho_half)
        self._b0 = -self._th * self._hp_at  # base flux B without the ext factor
        self._rho = rho_half
        self.grid = grid
        self.lam = base.lam

        n = spec.n
        hom = []
        for k in range(n):
            e = np.zeros(n)
            e[k] = 1.0
            hom.append(self._sweep(e, np.zeros(n)))
        self._hom = hom
        dg_term = spec.terminal.c
        m0 = np.empty((n, n))
        for k, fn in enumerate(hom):
            psi_T = fn.values[-1][0]
            eta_T = fn.values[-1][1]
            m0[:, k] = psi_T - dg_term * eta_T
        self._m0 = m0
        self.condition = float(np.linalg.cond(m0))
        if not np.isfinite(self.condition) or self.condition > cond_limit:
            raise SingularShooting(
                f"shooting matrix condition {self.condition:.3e} exceeds "
                f"{cond_limit:.1e}")

    def _rhs(self, j, y):
        """Joint RHS for stacked (psi, eta) at half-grid index j."""
        spec = self.spec
        g = spec.graph
        psi, eta = y[0], y[1]
        lam = self.lam
        q = lam * (g.sqrt_omega * (psi[:, None] - psi[None, :]))
        th1 = self._th1[j]
        # D_mu H[eta] + D_p H[q] with H = dmu Ham(mu,-p) + DF
        dth1 = self._th11[j] * eta[:, None] + self._th12[j] * eta[None, :]
        hs = self._h_at[j]
        dmu_h_eta = 0.5 * np.einsum("ij,ij->i", dth1, hs + hs.T)
        hq = self._hp_at[j] * (-q)
        dmu_h_q = 0.5 * np.einsum("ij,ij->i", th1, hq + hq.T)
        rhs_psi = dmu_h_eta + dmu_h_q - spec.coupling.c * eta \
            - (g.omega @ psi - g.degrees * psi)
        # D_mu B[eta] + D_p B[q] with B = -D_p Ham(mu,-p) * ext
        dth_eta = th1 * eta[:, None] + th1.T * eta[None, :]
        db = -(dth_eta * self._hp_at[j]) * self._ext[j] \
            + (self._th[j] * self._hpp_at[j] * q) * self._ext[j]
        if spec.extended_beta != 0.0:
            dext = 2.0 * spec.extended_beta * float(self._rho[j] @ eta)
            db = db + self._b0[j] * dext
        rhs_eta = np.einsum("ij,ji->i", g.sqrt_omega, db) \
            + (g.omega @ eta - g.degrees * eta)
        return np.stack([rhs_psi, rhs_eta])

    def _sweep(self, psi0, eta0) -> GridFn:
        y0 = np.stack([np.asarray(psi0, dtype=float), np.asarray(eta0, dtype=float)])
        return rk4_forward(self.grid, y0, self._rhs)

    def solve(self, nu) -> LinearizedSolution:
        nu = np.asarray(nu, dtype=float)
        if abs(nu.sum()) > 1e-10:
            raise ValueError("direction must be a tangent vector (zero sum)")
        part = self._sweep(np.zeros(self.spec.n), nu)
        dg_term = self.spec.terminal.c
        b = part.values[-1][0] - dg_term * part.values[-1][1]
        q_star = np.linalg.solve(self._m0, -b)
        combo = part.values + np.einsum(
            "k,ktsn->tsn", q_star, np.stack([fn.values for fn in self._hom], axis=0))
        psi = GridFn(self.grid, combo[:, 0])
        eta = GridFn(self.grid, combo[:, 1])
        return LinearizedSolution(psi, eta, nu, self.condition)


def linearized_solve(spec: GameSpec, base: MFGSolution, nu) -> LinearizedSolution:
    """Directional derivative of (phi, rho) w.r.t. the initial measure."""
    return ShootingOperator(base).solve(nu)


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

def fit_c1_on_trajectory(sol: MFGSolution) -> float:
    """Structural constant fitted along the solution trajectory."""
    spec = sol.spec
    rho_half = sol.rho.values
    p_half = sol.lam * sol.grad_phi()
    src = _backward_source(spec, rho_half, p_half)          # H(rho, lam grad phi)
    adj = spec.graph.adjacency
    th = theta_mat(spec.graph, rho_half)
    b = -th * np.where(adj, spec.model.h_prime(-p_half), 0.0)
    b *= _ext_factors(spec, rho_half)[:, None, None]
    pair_h = np.einsum("ti,ti->t", src, rho_half)
    pair_b = 0.5 * np.einsum("tij,tij->t", b, p_half)
    c1 = max(float(np.max(pair_h - pair_b)), float(np.max(-src)), spec.terminal.c)
    return max(c1, 1e-12)


def lasry_lions_probe(spec: GameSpec, sol: MFGSolution) -> float:
    """Duality decay along the solve: lam[(phi, rho)(T) - (phi, mu)(t)] minus
    2*C1*(T - t) with the fitted structural constant; must be <= 0."""
    c1 = fit_c1_on_trajectory(sol)
    lam = sol.lam
    span = sol.grid.t1 - sol.grid.t0
    pair_end = float(sol.phi.terminal() @ sol.rho.terminal())
    pair_start = float(sol.phi.initial() @ sol.mu)
    return lam * (pair_end - pair_start) - 2.0 * c1 * span


def phi_bound_probe(sol: MFGSolution, eps: float) -> float:
    """Ratio of eps * sup |lam * phi| to the a priori bound (4(T-t)+3) C1."""
    c1 = fit_c1_on_trajectory(sol)
    span = sol.grid.t1 - sol.grid.t0
    sup = float(np.max(np.abs(sol.lam * sol.phi.values)))
    return eps * sup / ((4.0 * span + 3.0) * c1)


def flow_property_check(spec: GameSpec, t: float, t1: float, mu,
                        n_steps: int | None = None, **kw) -> float:
    """Semigroup gap: restart the solve at t1 from rho(t1) and compare."""
    T = spec.horizon
    if not t <= t1 < T:
        raise ValueError("need t <= t1 < horizon")
    if n_steps is None:
        n_steps = default_n_steps(spec, t, T)
    sol = picard_solve(spec, t, mu, n_steps=n_steps, **kw)
    if t1 == t:
        return 0.0
    k1 = int(round((t1 - t) / sol.grid.dt))
    k1 = min(max(k1, 1), n_steps - 1)
    s1 = sol.grid.nodes[k1]
    mu1 = sol.rho.values[2 * k1]
    sol2 = picard_solve(spec, float(s1), mu1, n_steps=n_steps - k1,
                        phi0=sol.phi.values[2 * k1:], **kw)
    gap_rho = float(np.max(np.abs(sol.rho.values[2 * k1:] - sol2.rho.values)))
    gap_phi = float(np.max(np.abs(sol.phi.values[2 * k1:] - sol2.phi.values)))
    return gap_rho + gap_phi


def uniqueness_probe(spec: GameSpec, t: float, mu, seed: int = 0,
                     scale: float = 1.0, **kw) -> float:
    """Sup-norm disagreement of two solves from independent random guesses."""
    rng = np.random.default_rng(seed)
    n_steps = kw.pop("n_steps", None) or default_n_steps(spec, t, spec.horizon)
    grid = Grid(t, spec.horizon, n_steps)
    sols = []
    for _ in range(2):
        phi0 = scale * rng.standard_normal((grid.n_half, spec.n))
        sols.append(picard_solve(spec, t, mu, n_steps=n_steps, phi0=phi0, **kw))
    gap_phi = float(np.max(np.abs(sols[0].phi.values - sols[1].phi.values)))
    gap_rho = float(np.max(np.abs(sols[0].rho.values - sols[1].rho.values)))
    return max(gap_phi, gap_rho)


def dump_solution_csv(sol: MFGSolution, path) -> None:
    """Node samples as CSV: s, phi_1..phi_n, rho_1..rho_n (17 digits)."""
    n = sol.spec.n
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s"] + [f"phi_{i+1}" for i in range(n)]
                        + [f"rho_{i+1}" for i in range(n)])
        for s, ph, rh in zip(sol.grid.nodes, sol.phi.node_values, sol.rho.node_values):
            writer.writerow([f"{s:.17g}"] + [f"{x:.17g}" for x in ph]
                            + [f"{x:.17g}" for x in rh])
