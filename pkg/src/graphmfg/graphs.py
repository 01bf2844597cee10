"""Weighted graphs and the discrete transport calculus built on them.

Conventions used throughout the package:

* vertices are 0-indexed internally and 1-indexed in every file format and
  report;
* an *edge field* is a skew-symmetric ``(n, n)`` float array that vanishes
  off the edge set (both ``m[i, j]`` and ``m[j, i]`` are stored);
* the edge inner product is ``(m, m2) = 0.5 * sum_{(i,j) in E} m[i,j]*m2[i,j]``,
  the factor accounting for both orientations of each edge;
* a *simplex point* is a strictly positive probability vector;
* a *tangent vector* is a vector whose components sum to zero.

The gradient, divergence and Laplacian follow the weighted definitions
``(grad u)[i,j] = sqrt(w_ij) (u_i - u_j)``,
``(div m)[i] = sum_j sqrt(w_ij) m[j,i]`` and ``lap = div o grad``, so the
integration-by-parts identity ``dot(div m, u) == -(m, grad u)`` holds exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "WeightedGraph",
    "grad",
    "div",
    "laplacian",
    "edge_inner",
    "edge_norm",
    "rho_inner",
    "rho_div",
    "project_tangent",
    "theta",
    "theta_d1",
    "theta_d2",
    "theta_d11",
    "theta_d12",
    "theta_mat",
    "theta_d1_mat",
    "h_log",
    "validate_simplex",
    "validate_edge_field",
    "path_graph",
    "cycle_graph",
    "complete_graph",
    "torus_grid",
    "graph_from_dict",
    "GENERATORS",
]

MASS_TOL = 1e-12


# ---------------------------------------------------------------------------
# graph container and constructors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeightedGraph:
    """Connected undirected graph with symmetric positive edge weights.

    ``omega`` is the dense weight matrix; ``omega[i, j] > 0`` iff ``(i, j)``
    is an edge.  No self-loops.  Dense storage is deliberate: the package
    targets n <= ~64 where dense wins and keeps skew-symmetry handling
    trivial.
    """

    n: int
    omega: np.ndarray
    edges: tuple = field(init=False)          # ordered (i, j) with i < j
    adjacency: np.ndarray = field(init=False)  # boolean mask, symmetric
    sqrt_omega: np.ndarray = field(init=False)
    degrees: np.ndarray = field(init=False)    # weighted degree sum_j omega_ij
    omega_min: float = field(init=False)
    omega_max: float = field(init=False)

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float)
        if omega.shape != (self.n, self.n):
            raise ValueError(f"omega must be ({self.n}, {self.n}), got {omega.shape}")
        if self.n < 2:
            raise ValueError("need at least 2 vertices")
        if not np.allclose(omega, omega.T, atol=0.0):
            raise ValueError("omega must be symmetric")
        if np.any(np.diag(omega) != 0.0):
            raise ValueError("self-loops are not allowed (diagonal must be 0)")
        if np.any(omega < 0.0):
            raise ValueError("weights must be nonnegative")
        adjacency = omega > 0.0
        if not _connected(adjacency):
            raise ValueError("graph must be connected")
        iu, ju = np.nonzero(np.triu(adjacency, 1))
        edges = tuple((int(i), int(j)) for i, j in zip(iu, ju))
        omega = omega.copy()
        omega.setflags(write=False)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "adjacency", adjacency)
        object.__setattr__(self, "sqrt_omega", np.sqrt(omega))
        object.__setattr__(self, "degrees", omega.sum(axis=1))
        weights = omega[adjacency]
        object.__setattr__(self, "omega_min", float(weights.min()))
        object.__setattr__(self, "omega_max", float(weights.max()))

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def neighbors(self, i: int) -> np.ndarray:
        return np.nonzero(self.adjacency[i])[0]

    def edge_vector(self, m: np.ndarray) -> np.ndarray:
        """Values of an edge field on the i<j edge list."""
        idx = np.array(self.edges)
        return m[idx[:, 0], idx[:, 1]]

    def edge_field(self, vec: Sequence[float]) -> np.ndarray:
        """Skew-symmetric field from values on the i<j edge list."""
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_edges,):
            raise ValueError(f"expected {self.n_edges} edge values, got {vec.shape}")
        m = np.zeros((self.n, self.n))
        for (i, j), v in zip(self.edges, vec):
            m[i, j] = v
            m[j, i] = -v
        return m

    def spanning_tree_edges(self) -> list:
        """Edges of a BFS spanning tree, useful as a tangent-space basis."""
        seen = {0}
        queue = [0]
        tree = []
        while queue:
            i = queue.pop(0)
            for j in self.neighbors(i):
                j = int(j)
                if j not in seen:
                    seen.add(j)
                    tree.append((i, j))
                    queue.append(j)
        return tree


def _connected(adjacency: np.ndarray) -> bool:
    n = adjacency.shape[0]
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    stack = [0]
    while stack:
        i = stack.pop()
        for j in np.nonzero(adjacency[i])[0]:
            if not seen[j]:
                seen[j] = True
                stack.append(int(j))
    return bool(seen.all())


def _graph_from_weight_pairs(n: int, pairs: Iterable) -> WeightedGraph:
    omega = np.zeros((n, n))
    for i, j, w in pairs:
        omega[i, j] = w
        omega[j, i] = w
    return WeightedGraph(n, omega)


def path_graph(n: int, weight: float = 1.0) -> WeightedGraph:
    if n < 2:
        raise ValueError("path needs n >= 2")
    return _graph_from_weight_pairs(n, ((i, i + 1, weight) for i in range(n - 1)))


def cycle_graph(n: int, weight: float = 1.0) -> WeightedGraph:
    if n < 3:
        raise ValueError("cycle needs n >= 3")
    return _graph_from_weight_pairs(n, ((i, (i + 1) % n, weight) for i in range(n)))


def complete_graph(n: int, weight: float = 1.0) -> WeightedGraph:
    if n < 2:
        raise ValueError("complete graph needs n >= 2")
    return _graph_from_weight_pairs(
        n, ((i, j, weight) for i in range(n) for j in range(i + 1, n)))


def torus_grid(shape: Sequence[int]) -> WeightedGraph:
    """Nearest-neighbor discretization of the unit d-torus.

    Along axis k with ``shape[k]`` points the mesh is ``h = 1/shape[k]`` and
    every edge on that axis carries weight ``1/h**2 = shape[k]**2``.
    """
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ValueError("torus needs at least one axis")
    if any(s < 3 for s in shape):
        raise ValueError("torus needs >= 3 points per axis (no multi-edges)")
    n = int(np.prod(shape))
    strides = np.cumprod((1,) + shape[:-1])

    def flat(coords):
        return int(sum(c * s for c, s in zip(coords, strides)))

    pairs = []
    for idx in np.ndindex(shape):
        for ax, size in enumerate(shape):
            nxt = list(idx)
            nxt[ax] = (nxt[ax] + 1) % size
            pairs.append((flat(idx), flat(nxt), float(size) ** 2))
    return _graph_from_weight_pairs(n, pairs)


GENERATORS = {
    "path": {"params": {"n": "int >= 2", "weight": "float > 0 (default 1)"}},
    "cycle": {"params": {"n": "int >= 3", "weight": "float > 0 (default 1)"}},
    "complete": {"params": {"n": "int >= 2", "weight": "float > 0 (default 1)"}},
    "torus": {"params": {"shape": "[n_1, ..., n_d], n_k >= 3; weight n_k^2 per axis"}},
}


def graph_from_dict(data: dict) -> WeightedGraph:
    """Build a graph from its JSON description.

    Either ``{"generator": name, "params": {...}}`` or an explicit
    ``{"n": int, "edges": [[i, j, omega], ...]}`` with 1-indexed vertices.
    """
    if "generator" in data:
        name = data["generator"]
        params = dict(data.get("params", {}))
        if name == "path":
            return path_graph(int(params["n"]), float(params.get("weight", 1.0)))
        if name == "cycle":
            return cycle_graph(int(params["n"]), float(params.get("weight", 1.0)))
        if name == "complete":
            return complete_graph(int(params["n"]), float(params.get("weight", 1.0)))
        if name == "torus":
            shape = params.get("shape")
            if shape is None and "n" in params:
                shape = [params["n"]]
            return torus_grid(shape)
        raise ValueError(f"unknown generator {name!r} (known: {sorted(GENERATORS)})")
    n = int(data["n"])
    omega = np.zeros((n, n))
    for k, entry in enumerate(data["edges"]):
        if len(entry) != 3:
            raise ValueError(f"edges[{k}]: expected [i, j, omega]")
        i, j, w = int(entry[0]), int(entry[1]), float(entry[2])
        if not (1 <= i <= n and 1 <= j <= n):
            raise ValueError(f"edges[{k}] = ({i}, {j}): vertex out of range 1..{n}")
        if i == j:
            raise ValueError(f"edges[{k}] = ({i}, {j}): self-loops not allowed")
        if w <= 0.0:
            raise ValueError(f"edges[{k}] = ({i}, {j}): weight must be > 0, got {w}")
        omega[i - 1, j - 1] = w
        omega[j - 1, i - 1] = w
    return WeightedGraph(n, omega)


# ---------------------------------------------------------------------------
# validators
# ---------------------------------------------------------------------------

def validate_simplex(mu: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Check mu is a probability vector with every component > eps."""
    mu = np.asarray(mu, dtype=float)
    if mu.ndim != 1:
        raise ValueError("simplex point must be a vector")
    if abs(mu.sum() - 1.0) > MASS_TOL:
        raise ValueError(f"mass is {mu.sum():.17g}, not 1 within {MASS_TOL}")
    if np.any(mu <= eps):
        raise ValueError(f"components must exceed {eps}: min is {mu.min():.3e}")
    return mu


def validate_edge_field(g: WeightedGraph, m: np.ndarray, tol: float = 0.0) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape != (g.n, g.n):
        raise ValueError(f"edge field must be ({g.n}, {g.n}), got {m.shape}")
    if np.max(np.abs(m + m.T)) > tol:
        raise ValueError("edge field must be skew-symmetric")
    off = m[~g.adjacency]
    if off.size and np.max(np.abs(off)) > tol:
        raise ValueError("edge field must vanish off the edge set")
    return m


# ---------------------------------------------------------------------------
# first-order calculus
# ---------------------------------------------------------------------------

def grad(g: WeightedGraph, u: np.ndarray) -> np.ndarray:
    """(grad u)[i, j] = sqrt(w_ij) (u_i - u_j); zero off edges."""
    u = np.asarray(u, dtype=float)
    if u.shape != (g.n,):
        raise ValueError(f"potential must have length {g.n}, got {u.shape}")
    return g.sqrt_omega * (u[:, None] - u[None, :])


def div(g: WeightedGraph, m: np.ndarray) -> np.ndarray:
    """(div m)[i] = sum_j sqrt(w_ij) m[j, i]; components sum to zero."""
    m = np.asarray(m, dtype=float)
    if m.shape != (g.n, g.n):
        raise ValueError(f"edge field must be ({g.n}, {g.n}), got {m.shape}")
    return np.einsum("ij,ji->i", g.sqrt_omega, m)


def laplacian(g: WeightedGraph, u: np.ndarray) -> np.ndarray:
    """(lap u)[i] = sum_j w_ij (u_j - u_i), i.e. div o grad."""
    u = np.asarray(u, dtype=float)
    return g.omega @ u - g.degrees * u


def edge_inner(m: np.ndarray, m2: np.ndarray) -> float:
    """0.5 * sum over directed edges of m * m2 (fields vanish off edges)."""
    return 0.5 * float(np.sum(m * m2))


def edge_norm(m: np.ndarray) -> float:
    return float(np.sqrt(max(edge_inner(m, m), 0.0)))


def project_tangent(v: np.ndarray) -> np.ndarray:
    """Orthogonal projection onto the zero-sum hyperplane."""
    v = np.asarray(v, dtype=float)
    return v - v.mean(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# logarithmic mean and derivatives
# ---------------------------------------------------------------------------
#
# theta(r, s) = (r - s)/(log r - log s) extended by r on the diagonal and 0
# when r*s = 0.  Near the diagonal the quotient and especially its derivative
# formulas lose precision like eps/z^k with z = (r-s)/(r+s), so below a
# switch |z| < Z_SWITCH everything is evaluated through the even series
# G(z) = z/artanh(z):
#
#   theta   = a G(z),                a = (r+s)/2
#   d1theta = (G(z) + (1-z) G'(z))/2
#   d11     = (1-z)^2 G''(z)/(4a),   d12 = -(1-z^2) G''(z)/(4a)
#
# The G coefficients are exact rationals; truncation error at |z| = 0.1 is
# below 1e-15 while the raw formulas are good to ~eps/z^3 ~ 2e-13 there.

_G_COEFFS = np.array([
    1.0,
    -1.0 / 3.0,
    -4.0 / 45.0,
    -44.0 / 945.0,
    -428.0 / 14175.0,
    -10196.0 / 467775.0,
    -10719068.0 / 638512875.0,
    -25865068.0 / 1915538625.0,
])
_Z_SWITCH = 0.1


def _poly_even(z2: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    acc = np.zeros_like(z2)
    for c in coeffs[::-1]:
        acc = acc * z2 + c
    return acc


def _G(z):
    return _poly_even(z * z, _G_COEFFS)


def _G_prime(z):
    k = np.arange(1, len(_G_COEFFS))
    return z * _poly_even(z * z, 2 * k * _G_COEFFS[1:])


def _G_second(z):
    k = np.arange(1, len(_G_COEFFS))
    return _poly_even(z * z, 2 * k * (2 * k - 1) * _G_COEFFS[1:])


def _split(r, s):
    """Common pieces: a, z and a safe log-ratio for the raw branch."""
    a = 0.5 * (r + s)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(a > 0.0, (r - s) / np.where(a > 0.0, 2.0 * a, 1.0), 0.0)
    return a, z


def theta(r, s):
    """Logarithmic mean, vectorized; zero whenever r*s == 0."""
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(r < 0.0) or np.any(s < 0.0):
        raise ValueError("theta requires nonnegative arguments")
    a, z = _split(r, s)
    near = np.abs(z) < _Z_SWITCH
    rs = np.where(near, 1.0, r)  # dummies keep the raw branch finite
    ss = np.where(near, 2.0, s)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = (rs - ss) / (np.log(rs) - np.log(ss))
    out = np.where(near, a * _G(z), raw)
    out = np.where((r == 0.0) | (s == 0.0), 0.0, out)
    return out if out.ndim else float(out)


def h_log(u):
    """Mobility profile: (1+u)|log u| h_log(u) = |u-1|, h_log(1) = 1/2.

    Satisfies theta(r, s) = (r + s) * h_log(s / r) for r, s > 0; bounded by
    1/2 and vanishing as u -> 0 or u -> +inf.
    """
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0.0):
        raise ValueError("h_log requires positive argument")
    one = np.ones_like(u)
    return theta(one, u) / (1.0 + u)


def _theta_d1_arrays(r, s):
    a, z = _split(r, s)
    near = np.abs(z) < _Z_SWITCH
    rs = np.where(near, 1.0, r)
    ss = np.where(near, 2.0, s)
    with np.errstate(divide="ignore", invalid="ignore"):
        big_d = np.log(rs) - np.log(ss)
        raw = 1.0 / big_d - (rs - ss) / (rs * big_d * big_d)
    series = 0.5 * (_G(z) + (1.0 - z) * _G_prime(z))
    return np.where(near, series, raw)


def theta_d1(r, s):
    """Partial derivative of theta in its first argument (r, s > 0)."""
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(r <= 0.0) or np.any(s <= 0.0):
        raise ValueError("theta_d1 requires positive arguments")
    out = _theta_d1_arrays(r, s)
    return out if out.ndim else float(out)


def theta_d2(r, s):
    """Partial derivative in the second argument: theta_d2(r,s) = theta_d1(s,r)."""
    return theta_d1(s, r)


def theta_d11(r, s):
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(r <= 0.0) or np.any(s <= 0.0):
        raise ValueError("theta_d11 requires positive arguments")
    a, z = _split(r, s)
    near = np.abs(z) < _Z_SWITCH
    rs = np.where(near, 1.0, r)
    ss = np.where(near, 2.0, s)
    with np.errstate(divide="ignore", invalid="ignore"):
        big_d = np.log(rs) - np.log(ss)
        nn = rs - ss
        raw = (-2.0 / (rs * big_d**2) + nn / (rs**2 * big_d**2)
               + 2.0 * nn / (rs**2 * big_d**3))
    series = (1.0 - z) ** 2 * _G_second(z) / (4.0 * a)
    out = np.where(near, series, raw)
    return out if out.ndim else float(out)


def theta_d12(r, s):
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(r <= 0.0) or np.any(s <= 0.0):
        raise ValueError("theta_d12 requires positive arguments")
    a, z = _split(r, s)
    near = np.abs(z) < _Z_SWITCH
    rs = np.where(near, 1.0, r)
    ss = np.where(near, 2.0, s)
    with np.errstate(divide="ignore", invalid="ignore"):
        big_d = np.log(rs) - np.log(ss)
        nn = rs - ss
        raw = (1.0 / (ss * big_d**2) + 1.0 / (rs * big_d**2)
               - 2.0 * nn / (rs * ss * big_d**3))
    series = -(1.0 - z * z) * _G_second(z) / (4.0 * a)
    out = np.where(near, series, raw)
    return out if out.ndim else float(out)


def theta_mat(g: WeightedGraph, rho: np.ndarray) -> np.ndarray:
    """Edge matrix theta(rho_i, rho_j), zero off edges.

    ``rho`` may carry leading axes (e.g. a time axis); the edge axes are the
    last two of the result.
    """
    rho = np.asarray(rho, dtype=float)
    t = theta(rho[..., :, None], rho[..., None, :])
    return np.where(g.adjacency, t, 0.0)


def theta_d1_mat(g: WeightedGraph, rho: np.ndarray) -> np.ndarray:
    """Edge matrix of d1-theta(rho_i, rho_j), zero off edges; rho > 0."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0.0):
        raise ValueError("theta_d1_mat requires strictly positive density")
    t = _theta_d1_arrays(rho[..., :, None], rho[..., None, :])
    return np.where(g.adjacency, t, 0.0)


def rho_inner(g: WeightedGraph, rho: np.ndarray, v: np.ndarray, v2: np.ndarray) -> float:
    """Mobility-weighted bilinear form 0.5 * sum_E v*v2*theta(rho_i, rho_j)."""
    return 0.5 * float(np.sum(v * v2 * theta_mat(g, rho)))


def rho_div(g: WeightedGraph, rho: np.ndarray, v: np.ndarray) -> np.ndarray:
    """(rho-div v)[i] = sum_j sqrt(w_ij) theta(rho_i, rho_j) v[j, i]."""
    return div(g, theta_mat(g, rho) * v)
