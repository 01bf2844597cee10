"""Game data: separable Lagrangian/Hamiltonian families, couplings, terminal
costs, their derivatives, and the derived forward-backward maps (H, B, g).

The running kinetic cost and its dual are built edgewise from a convex pair
(l, h), h the Legendre transform of l, weighted by the logarithmic mean of
the adjacent densities:

    L(mu, m)     = 0.5 * sum_E theta_ij * l(m_ij / theta_ij)     (kinetic)
    Lbar(mu, w)  = 0.5 * sum_E theta_ij * l(w_ij)                (velocity form)
    Ham(mu, p)   = 0.5 * sum_E theta_ij * h(p_ij)

Supported families: quadratic l(s) = s^2/2 (so Ham is the quarter-weighted
sum of theta * p^2) and the power family l(s) = |s|^p0 / p0 with conjugate
exponent q = p0/(p0-1).

The mean-field coupling is F(mu) = -(cF/2)|mu|^2 (strictly concave) and the
terminal cost is U_T(mu) = (cT/2)|mu|^2 (convex).  The forward-backward
system uses the derived maps

    H(mu, p) = D_mu Ham(mu, -p) + DF(mu),
    B(mu, p) = -D_p Ham(mu, -p) * (1 + beta * |mu|^2),
    g(mu)    = D_mu U_T(mu),

where beta = 0 recovers the variational case and a small beta > 0 gives an
extended flux that is no longer a Hamiltonian derivative but keeps the
mobility-dominated bound.

Every density derivative demands strict interiority (all components above
1e-10); calls below that raise rather than extrapolate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import (
    WeightedGraph,
    grad,
    edge_inner,
    h_log,
    theta_mat,
    theta_d1_mat,
    theta_d11,
    theta_d12,
)

__all__ = [
    "SeparableModel",
    "QuadraticCoupling",
    "QuadraticTerminal",
    "GameSpec",
    "hamiltonian",
    "lagrangian",
    "bar_lagrangian",
    "dp_hamiltonian",
    "dmu_hamiltonian",
    "dm_lagrangian",
    "dmu_lagrangian",
    "dv_bar_lagrangian",
    "dmu_bar_lagrangian",
    "running_cost_L",
    "unique_momentum",
    "optimal_velocity",
    "variational_objective",
    "dmu_H_variational",
    "hb_maps",
    "mobility_profile",
    "monotonicity_check",
    "fit_structural_c1",
    "INTERIOR_EPS",
]

INTERIOR_EPS = 1e-10


def _require_interior(mu: np.ndarray, what: str = "density") -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    if np.any(mu <= INTERIOR_EPS):
        raise ValueError(
            f"{what} must be strictly interior (> {INTERIOR_EPS}); min = {mu.min():.3e}")
    return mu


# ---------------------------------------------------------------------------
# convex edge pairs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SeparableModel:
    """Edgewise convex pair (l, h), h the Legendre transform of l.

    ``family`` is "quadratic" or "power"; the power family uses exponent
    ``p0`` in (1, 4] with conjugate q = p0/(p0-1).  Both l are even, so the
    edgewise sums over both orientations of an edge agree.
    """

    family: str = "quadratic"
    p0: float = 2.0

    def __post_init__(self):
        if self.family not in ("quadratic", "power"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == "power" and not (1.0 < self.p0 <= 4.0):
            raise ValueError("power family needs p0 in (1, 4]")
        if self.family == "quadratic":
            object.__setattr__(self, "p0", 2.0)
        # Fenchel-Young spot check: l(s) + h(l'(s)) == s l'(s)
        s = np.array([-2.0, -0.7, 0.3, 1.5])
        gap = np.abs(self.l(s) + self.h(self.l_prime(s)) - s * self.l_prime(s))
        if np.max(gap) > 1e-12:
            raise AssertionError("Legendre pair inconsistent")

    @property
    def q0(self) -> float:
        return self.p0 / (self.p0 - 1.0)

    def l(self, s):
        s = np.asarray(s, dtype=float)
        if self.family == "quadratic":
            return 0.5 * s * s
        return np.abs(s) ** self.p0 / self.p0

    def l_prime(self, s):
        s = np.asarray(s, dtype=float)
        if self.family == "quadratic":
            return s
        return np.sign(s) * np.abs(s) ** (self.p0 - 1.0)

    def h(self, p):
        p = np.asarray(p, dtype=float)
        if self.family == "quadratic":
            return 0.5 * p * p
        return np.abs(p) ** self.q0 / self.q0

    def h_prime(self, p):
        p = np.asarray(p, dtype=float)
        if self.family == "quadratic":
            return p
        return np.sign(p) * np.abs(p) ** (self.q0 - 1.0)

    def h_second(self, p):
        p = np.asarray(p, dtype=float)
        if self.family == "quadratic":
            return np.ones_like(p)
        with np.errstate(divide="ignore"):
            return (self.q0 - 1.0) * np.abs(p) ** (self.q0 - 2.0)


@dataclass(frozen=True)
class QuadraticCoupling:
    """F(mu) = -(c/2)|mu|^2 with c > 0, so D^2 F = -c I < 0."""

    c: float = 1.0

    def __post_init__(self):
        if self.c <= 0.0:
            raise ValueError("coupling strength must be positive")

    def value(self, mu):
        mu = np.asarray(mu, dtype=float)
        return -0.5 * self.c * float(mu @ mu)

    def gradient(self, mu):
        return -self.c * np.asarray(mu, dtype=float)

    def hessian_apply(self, eta):
        return -self.c * np.asarray(eta, dtype=float)


@dataclass(frozen=True)
class QuadraticTerminal:
    """U_T(mu) = (c/2)|mu|^2 with c >= 0, convex on the simplex."""

    c: float = 1.0

    def __post_init__(self):
        if self.c < 0.0:
            raise ValueError("terminal weight must be nonnegative")

    def value(self, mu):
        mu = np.asarray(mu, dtype=float)
        return 0.5 * self.c * float(mu @ mu)

    def gradient(self, mu):
        return self.c * np.asarray(mu, dtype=float)

    def jacobian(self, mu):
        return self.c * np.eye(len(mu))


@dataclass(frozen=True)
class GameSpec:
    """One game instance: graph, model family, costs, horizon.

    ``extended_beta`` != 0 switches the forward flux to the extended map
    B = -D_p Ham(mu, -p) * (1 + beta |mu|^2).
    """

    graph: WeightedGraph
    model: SeparableModel
    coupling: QuadraticCoupling
    terminal: QuadraticTerminal
    horizon: float
    extended_beta: float = 0.0

    def __post_init__(self):
        if self.horizon <= 0.0:
            raise ValueError("horizon must be positive")

    @property
    def n(self) -> int:
        return self.graph.n


def make_game(graph, family="quadratic", p0=2.0, c_f=1.0, c_t=1.0,
              horizon=1.0, extended_beta=0.0) -> GameSpec:
    return GameSpec(graph, SeparableModel(family, p0), QuadraticCoupling(c_f),
                    QuadraticTerminal(c_t), horizon, extended_beta)


# ---------------------------------------------------------------------------
# scalar functionals
# ---------------------------------------------------------------------------

def hamiltonian(spec: GameSpec, mu, p) -> float:
    """0.5 * sum_E theta * h(p); convex in p, zero at p = 0."""
    th = theta_mat(spec.graph, mu)
    return 0.5 * float(np.sum(th * spec.model.h(p)))


def lagrangian(spec: GameSpec, mu, m) -> float:
    """Kinetic cost; +inf when some edge has zero mobility but nonzero flux."""
    g = spec.graph
    th = theta_mat(g, mu)
    m = np.asarray(m, dtype=float)
    on_edge = g.adjacency
    dead = on_edge & (th == 0.0)
    if np.any(dead & (m != 0.0)):
        return float("inf")
    w = np.zeros_like(th)
    alive = on_edge & (th > 0.0)
    w[alive] = m[alive] / th[alive]
    return 0.5 * float(np.sum(th * spec.model.l(w)))


def bar_lagrangian(spec: GameSpec, mu, w) -> float:
    """Velocity form: 0.5 * sum_E theta * l(w) == lagrangian at m = theta*w."""
    th = theta_mat(spec.graph, mu)
    return 0.5 * float(np.sum(th * spec.model.l(w)))


# ---------------------------------------------------------------------------
# first derivatives
# ---------------------------------------------------------------------------

def dp_hamiltonian(spec: GameSpec, mu, p) -> np.ndarray:
    """Edge gradient theta_ij h'(p_ij) w.r.t. the half-sum inner product."""
    return theta_mat(spec.graph, mu) * spec.model.h_prime(p)


def dmu_hamiltonian(spec: GameSpec, mu, p) -> np.ndarray:
    mu = _require_interior(mu)
    th1 = theta_d1_mat(spec.graph, mu)
    hp = np.where(spec.graph.adjacency, spec.model.h(p), 0.0)
    return 0.5 * np.sum(th1 * (hp + hp.T), axis=1)


def dm_lagrangian(spec: GameSpec, mu, m) -> np.ndarray:
    mu = _require_interior(mu)
    g = spec.graph
    th = theta_mat(g, mu)
    w = np.where(g.adjacency, m / np.where(g.adjacency, th, 1.0), 0.0)
    return np.where(g.adjacency, spec.model.l_prime(w), 0.0)


def dmu_lagrangian(spec: GameSpec, mu, m) -> np.ndarray:
    """Density derivative of the kinetic cost: the integrand differentiates
    through theta as l(w) - w l'(w) per directed edge."""
    mu = _require_interior(mu)
    g = spec.graph
    th = theta_mat(g, mu)
    th1 = theta_d1_mat(g, mu)
    w = np.where(g.adjacency, m / np.where(g.adjacency, th, 1.0), 0.0)
    psi = np.where(g.adjacency, spec.model.l(w) - w * spec.model.l_prime(w), 0.0)
    return 0.5 * np.sum(th1 * (psi + psi.T), axis=1)


def dv_bar_lagrangian(spec: GameSpec, mu, w) -> np.ndarray:
    return theta_mat(spec.graph, mu) * spec.model.l_prime(w)


def dmu_bar_lagrangian(spec: GameSpec, mu, w) -> np.ndarray:
    mu = _require_interior(mu)
    th1 = theta_d1_mat(spec.graph, mu)
    lw = np.where(spec.graph.adjacency, spec.model.l(w), 0.0)
    return 0.5 * np.sum(th1 * (lw + lw.T), axis=1)


def running_cost_L(spec: GameSpec, mu, w) -> np.ndarray:
    """Per-vertex running cost of the chain game: D_mu Lbar - D_mu F."""
    return dmu_bar_lagrangian(spec, mu, w) - spec.coupling.gradient(mu)


# ---------------------------------------------------------------------------
# momentum inversion and the variational density derivative
# ---------------------------------------------------------------------------

def unique_momentum(spec: GameSpec, mu, vbar, check_tol: float = 1e-10) -> np.ndarray:
    """The unique momentum p with Lbar(mu, vbar) + Ham(mu, p) = (vbar, p)_mu.

    For the separable family p_ij = l'(vbar_ij) edgewise; the Fenchel-Young
    equality is verified before returning.
    """
    g = spec.graph
    mu = _require_interior(mu)
    vbar = np.asarray(vbar, dtype=float)
    p = np.where(g.adjacency, spec.model.l_prime(vbar), 0.0)
    th = theta_mat(g, mu)
    pairing = 0.5 * float(np.sum(th * vbar * p))
    gap = bar_lagrangian(spec, mu, vbar) + hamiltonian(spec, mu, p) - pairing
    scale = 1.0 + abs(pairing)
    if abs(gap) > check_tol * scale:
        raise AssertionError(f"Fenchel-Young equality violated: gap {gap:.3e}")
    return p


def optimal_velocity(spec: GameSpec, mu, p) -> np.ndarray:
    """Inverse of unique_momentum: vbar_ij = h'(p_ij) edgewise."""
    return np.where(spec.graph.adjacency, spec.model.h_prime(p), 0.0)


def variational_objective(spec: GameSpec, i: int, mu, p, w) -> float:
    """Perturbation functional whose supremum over w is D_{mu_i} Ham(mu, p).

    Evaluates sum over l in N(i) of (w + grad log mu)_il p_il d1theta(mu_i,
    mu_l) minus the i-th density derivative of Lbar at w + grad log mu.
    """
    g = spec.graph
    mu = _require_interior(mu)
    wbar = np.asarray(w, dtype=float) + grad(g, np.log(mu))
    th1 = theta_d1_mat(g, mu)
    drive = float(np.sum(wbar[i] * np.asarray(p)[i] * th1[i]))
    return drive - float(dmu_bar_lagrangian(spec, mu, wbar)[i])


def dmu_H_variational(spec: GameSpec, i: int, mu, p, v) -> float:
    """Variational value at the optimal control v (w = v attains the sup)."""
    return variational_objective(spec, i, mu, p, v)


# ---------------------------------------------------------------------------
# derived forward-backward maps and their linearizations
# ---------------------------------------------------------------------------

def _ext_factor(spec: GameSpec, mu) -> float:
    if spec.extended_beta == 0.0:
        return 1.0
    mu = np.asarray(mu, dtype=float)
    return 1.0 + spec.extended_beta * float(mu @ mu)


def H_map(spec: GameSpec, mu, p) -> np.ndarray:
    return dmu_hamiltonian(spec, mu, -np.asarray(p)) + spec.coupling.gradient(mu)


def B_map(spec: GameSpec, mu, p) -> np.ndarray:
    return -dp_hamiltonian(spec, mu, -np.asarray(p)) * _ext_factor(spec, mu)


def g_map(spec: GameSpec, mu) -> np.ndarray:
    return spec.terminal.gradient(mu)


def hb_maps(spec: GameSpec):
    """The (H, B, g) callables driving the forward-backward system."""
    return (lambda mu, p: H_map(spec, mu, p),
            lambda mu, p: B_map(spec, mu, p),
            lambda mu: g_map(spec, mu))


def _theta_hessian_mats(g: WeightedGraph, mu):
    r = mu[:, None]
    s = mu[None, :]
    th11 = np.where(g.adjacency, theta_d11(np.where(g.adjacency, r, 1.0),
                                           np.where(g.adjacency, s, 1.0)), 0.0)
    th12 = np.where(g.adjacency, theta_d12(np.where(g.adjacency, r, 1.0),
                                           np.where(g.adjacency, s, 1.0)), 0.0)
    return th11, th12


def _dtheta_dir(g: WeightedGraph, th1, eta):
    # directional derivative of theta(mu_i, mu_j) along eta
    return th1 * eta[:, None] + th1.T * eta[None, :]


def hess_pp_apply(spec: GameSpec, mu, p, q) -> np.ndarray:
    """D_pp Ham(mu, p)[q] edgewise."""
    return theta_mat(spec.graph, mu) * spec.model.h_second(p) * q


def dmuH_dir_mu(spec: GameSpec, mu, p, eta) -> np.ndarray:
    """Directional derivative of D_mu Ham in mu along eta."""
    mu = _require_interior(mu)
    g = spec.graph
    th11, th12 = _theta_hessian_mats(g, mu)
    dth1 = th11 * eta[:, None] + th12 * eta[None, :]
    hp = np.where(g.adjacency, spec.model.h(p), 0.0)
    return 0.5 * np.sum(dth1 * (hp + hp.T), axis=1)


def dmuH_dir_p(spec: GameSpec, mu, p, q) -> np.ndarray:
    """Directional derivative of D_mu Ham in p along q."""
    mu = _require_interior(mu)
    g = spec.graph
    th1 = theta_d1_mat(g, mu)
    hq = np.where(g.adjacency, spec.model.h_prime(p) * q, 0.0)
    return 0.5 * np.sum(th1 * (hq + hq.T), axis=1)


def dpH_dir_mu(spec: GameSpec, mu, p, eta) -> np.ndarray:
    """Directional derivative of D_p Ham in mu along eta."""
    mu = _require_interior(mu)
    g = spec.graph
    th1 = theta_d1_mat(g, mu)
    return _dtheta_dir(g, th1, np.asarray(eta, dtype=float)) * spec.model.h_prime(p)


def d_mu_H(spec: GameSpec, mu, p, eta) -> np.ndarray:
    """D_mu H(mu, p)[eta] for the derived backward map."""
    return dmuH_dir_mu(spec, mu, -np.asarray(p), eta) + spec.coupling.hessian_apply(eta)


def d_p_H(spec: GameSpec, mu, p, q) -> np.ndarray:
    return dmuH_dir_p(spec, mu, -np.asarray(p), -np.asarray(q))


def d_mu_B(spec: GameSpec, mu, p, eta) -> np.ndarray:
    base = -dpH_dir_mu(spec, mu, -np.asarray(p), eta) * _ext_factor(spec, mu)
    if spec.extended_beta != 0.0:
        mu = np.asarray(mu, dtype=float)
        dext = 2.0 * spec.extended_beta * float(mu @ eta)
        base = base - dp_hamiltonian(spec, mu, -np.asarray(p)) * dext
    return base


def d_p_B(spec: GameSpec, mu, p, q) -> np.ndarray:
    return hess_pp_apply(spec, mu, -np.asarray(p), q) * _ext_factor(spec, mu)


def dg_apply(spec: GameSpec, mu, eta) -> np.ndarray:
    return spec.terminal.c * np.asarray(eta, dtype=float)


# ---------------------------------------------------------------------------
# structural checks
# ---------------------------------------------------------------------------

def mobility_profile(spec: GameSpec, u, p) -> np.ndarray:
    """Dominating profile a(u, p) = h_log(u) * max_E |h'(p)| for the flux bound.

    Satisfies |D_p Ham(mu,p)_ij| <= (mu_i + mu_j) a(mu_j/mu_i, p) and decays
    as u -> 0 or u -> inf, locally uniformly in p.
    """
    hp = np.abs(spec.model.h_prime(np.asarray(p, dtype=float)))
    sup_hp = float(np.max(np.where(spec.graph.adjacency, hp, 0.0)))
    return h_log(u) * sup_hp


def random_interior(rng: np.random.Generator, n: int, spread: float = 1.0) -> np.ndarray:
    """Strictly interior simplex sample via a softmax of Gaussians."""
    x = spread * rng.standard_normal(n)
    e = np.exp(x - x.max())
    return e / e.sum()


def random_edge_field(rng: np.random.Generator, g: WeightedGraph,
                      scale: float = 1.0) -> np.ndarray:
    return g.edge_field(scale * rng.standard_normal(g.n_edges))


def random_tangent(rng: np.random.Generator, n: int, scale: float = 1.0) -> np.ndarray:
    v = scale * rng.standard_normal(n)
    return v - v.mean()


def monotonicity_check(spec: GameSpec, samples: int = 1000, seed: int = 0,
                       p_scale: float = 2.0) -> dict:
    """Sample the strict monotonicity gaps that guarantee uniqueness.

    For random interior (rho, p) and nonzero (eta, q) this reports the
    minimum of

    * the Hessian-form gap  (q, D_pp Ham[q]) - (eta, D_mumu Ham[eta] + D^2 F[eta]),
    * the differential Lasry-Lions gap with the actual derived (H, B),

    together with the empirical lower bounds entering the structural
    constant fit.  Report-only: nothing is asserted here.
    """
    g = spec.graph
    rng = np.random.default_rng(seed)
    min_hess = np.inf
    min_ll = np.inf
    inf_euler = np.inf
    inf_dmu_l = np.inf
    for _ in range(samples):
        rho = random_interior(rng, g.n)
        p = random_edge_field(rng, g, p_scale)
        eta = random_tangent(rng, g.n)
        q = random_edge_field(rng, g)
        lhs = float(eta @ (dmuH_dir_mu(spec, rho, p, eta)
                           + spec.coupling.hessian_apply(eta)))
        rhs = edge_inner(q, hess_pp_apply(spec, rho, p, q))
        min_hess = min(min_hess, rhs - lhs)
        lhs_ll = float(eta @ (d_mu_H(spec, rho, p, eta) + d_p_H(spec, rho, p, q)))
        rhs_ll = edge_inner(q, d_mu_B(spec, rho, p, eta) + d_p_B(spec, rho, p, q))
        min_ll = min(min_ll, rhs_ll - lhs_ll)
        # empirical lower bounds for the coercivity assumptions
        m = random_edge_field(rng, g, p_scale)
        dm = dm_lagrangian(spec, rho, m)
        dmu = dmu_lagrangian(spec, rho, m)
        inf_euler = min(inf_euler, edge_inner(m, dm) + float(rho @ dmu))
        inf_dmu_l = min(inf_dmu_l, float(np.min(-dmu)))
    return {
        "samples": samples,
        "min_hessian_gap": float(min_hess),
        "min_lasry_lions_gap": float(min_ll),
        "inf_euler_pairing": float(inf_euler),
        "inf_neg_dmu_lagrangian": float(inf_dmu_l),
    }


def fit_structural_c1(spec: GameSpec, samples: int = 200, seed: int = 0,
                      p_scale: float = 2.0) -> float:
    """Empirical structural constant: smallest C1 over the sampled compact
    with (B,p) >= (H,mu) - C1, H_i >= -C1, and |g| <= C1."""
    g = spec.graph
    rng = np.random.default_rng(seed)
    c1 = spec.terminal.c  # |g(mu)|_inf = cT * max mu <= cT on the cube
    for _ in range(samples):
        mu = random_interior(rng, g.n)
        p = random_edge_field(rng, g, p_scale)
        h_vec = H_map(spec, mu, p)
        b = B_map(spec, mu, p)
        c1 = max(c1, float(h_vec @ mu) - edge_inner(b, p), float(np.max(-h_vec)))
    return max(c1, 1e-12)
