"""Uniform time grids, half-grid sampled trajectories, and RK4 sweeps.

Every trajectory in the package lives on the *half-grid* of a uniform grid:
with N intervals on [t0, t1] the half-grid holds 2N+1 samples (nodes and
interval midpoints).  Storing midpoints means a classical RK4 sweep over the
node grid finds all its stage values by direct indexing, and composite
Simpson quadrature and fourth-order derivative reconstruction come for free.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["Grid", "GridFn", "rk4_forward", "rk4_backward", "simpson", "midpoint_defect"]


@dataclass(frozen=True)
class Grid:
    """Uniform grid on [t0, t1] with ``n_steps`` intervals."""

    t0: float
    t1: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("grid needs at least one interval")
        if not self.t1 > self.t0:
            raise ValueError("need t1 > t0")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.t0, self.t1, self.n_steps + 1)

    @property
    def half(self) -> np.ndarray:
        return np.linspace(self.t0, self.t1, 2 * self.n_steps + 1)

    @property
    def n_half(self) -> int:
        return 2 * self.n_steps + 1


class GridFn:
    """Trajectory sampled on a grid's half-grid, with quartic interpolation.

    ``values`` has shape ``(2*n_steps + 1, *state_shape)``.  Evaluation at
    points that coincide with half-grid samples is exact indexing; anywhere
    else a local degree-4 Lagrange interpolant over the five nearest samples
    is used, matching the RK4 order of the producing sweeps.
    """

    def __init__(self, grid: Grid, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.shape[0] != grid.n_half:
            raise ValueError(
                f"expected {grid.n_half} half-grid samples, got {values.shape[0]}")
        self.grid = grid
        self.values = values

    @property
    def node_values(self) -> np.ndarray:
        return self.values[::2]

    def initial(self) -> np.ndarray:
        return self.values[0]

    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def __call__(self, s):
        scalar = np.ndim(s) == 0
        s = np.atleast_1d(np.asarray(s, dtype=float))
        h2 = 0.5 * self.grid.dt
        x = (s - self.grid.t0) / h2
        j = np.rint(x).astype(int)
        n_last = self.grid.n_half - 1
        exact = (np.abs(x - j) < 1e-9) & (j >= 0) & (j <= n_last)
        out = np.empty((s.size,) + self.values.shape[1:])
        if np.any(exact):
            out[exact] = self.values[j[exact]]
        rest = ~exact
        if np.any(rest):
            out[rest] = self._lagrange(x[rest])
        return out[0] if scalar else out

    def _stencil(self, x: np.ndarray):
        base = np.clip(np.floor(x).astype(int) - 1, 0, self.grid.n_half - 5)
        offsets = base[:, None] + np.arange(5)[None, :]
        return base, offsets

    def _lagrange(self, x: np.ndarray) -> np.ndarray:
        base, offsets = self._stencil(x)
        xi = x[:, None] - offsets  # distances in half-step units
        w = np.empty_like(xi)
        for k in range(5):
            cols = [c for c in range(5) if c != k]
            w[:, k] = np.prod(xi[:, cols], axis=1) / _LAGRANGE_DENOM[k]
        vals = self.values[offsets]  # (q, 5, *state)
        return np.einsum("qk,qk...->q...", w, vals)

    def derivative(self, s) -> np.ndarray:
        """Time derivative via the differentiated local quartic."""
        scalar = np.ndim(s) == 0
        s = np.atleast_1d(np.asarray(s, dtype=float))
        h2 = 0.5 * self.grid.dt
        x = (s - self.grid.t0) / h2
        base, offsets = self._stencil(x)
        xi = x[:, None] - offsets
        dw = np.zeros_like(xi)
        for k in range(5):
            cols = [c for c in range(5) if c != k]
            for drop in cols:
                keep = [c for c in cols if c != drop]
                dw[:, k] += np.prod(xi[:, keep], axis=1)
            dw[:, k] /= _LAGRANGE_DENOM[k]
        vals = self.values[offsets]
        out = np.einsum("qk,qk...->q...", dw, vals) / h2
        return out[0] if scalar else out


# denominators prod_{c != k} (k - c) for the 5-point stencil
_LAGRANGE_DENOM = np.array([24.0, -6.0, 4.0, -6.0, 24.0])


def rk4_forward(grid: Grid, y0: np.ndarray,
                rhs: Callable[[int, np.ndarray], np.ndarray]) -> GridFn:
    """Classical RK4 over the node grid; midpoints filled by cubic Hermite.

    ``rhs(j, y)`` receives the half-grid index ``j`` of the stage time.  The
    Hermite midpoint fill reuses the already-computed nodal slopes, so the
    stored midpoints are fourth-order accurate like the nodes.  Every stage
    state is passed through ``rhs``, so state screens can live there.
    """
    dt = grid.dt
    y = np.asarray(y0, dtype=float)
    n = grid.n_steps
    out = np.empty((grid.n_half,) + y.shape)
    out[0] = y
    k1 = rhs(0, y)
    for k in range(n):
        j = 2 * k
        k2 = rhs(j + 1, y + 0.5 * dt * k1)
        k3 = rhs(j + 1, y + 0.5 * dt * k2)
        k4 = rhs(j + 2, y + dt * k3)
        y_next = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        k1_next = rhs(j + 2, y_next)
        out[j + 1] = 0.5 * (y + y_next) + (dt / 8.0) * (k1 - k1_next)
        out[j + 2] = y_next
        y, k1 = y_next, k1_next
    return GridFn(grid, out)


def rk4_backward(grid: Grid, y_terminal: np.ndarray,
                 rhs: Callable[[int, np.ndarray], np.ndarray]) -> GridFn:
    """RK4 sweep from t1 down to t0 (step -dt), same storage layout."""
    dt = grid.dt
    y = np.asarray(y_terminal, dtype=float)
    n = grid.n_steps
    out = np.empty((grid.n_half,) + y.shape)
    out[-1] = y
    k1 = rhs(2 * n, y)
    for k in range(n - 1, -1, -1):
        j = 2 * k
        k2 = rhs(j + 1, y - 0.5 * dt * k1)
        k3 = rhs(j + 1, y - 0.5 * dt * k2)
        k4 = rhs(j, y - dt * k3)
        y_prev = y - (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        k1_prev = rhs(j, y_prev)
        out[j + 1] = 0.5 * (y + y_prev) + (dt / 8.0) * (k1_prev - k1)
        out[j] = y_prev
        y, k1 = y_prev, k1_prev
    return GridFn(grid, out)


def simpson(grid: Grid, samples: np.ndarray) -> np.ndarray:
    """Composite Simpson over the half-grid samples (axis 0)."""
    samples = np.asarray(samples)
    if samples.shape[0] != grid.n_half:
        raise ValueError("need half-grid samples")
    nodes = samples[0:-1:2]
    mids = samples[1::2]
    ends = samples[2::2]
    return (grid.dt / 6.0) * np.sum(nodes + 4.0 * mids + ends, axis=0)


def midpoint_defect(fn: GridFn, rhs_half: np.ndarray) -> float:
    """Sup norm of d/ds fn - rhs at interval midpoints.

    The derivative is reconstructed by the centered five-point formula on
    the half-grid (fourth order); ``rhs_half`` holds the equation's right
    side at every half-grid sample.
    """
    v = fn.values
    h2 = 0.5 * fn.grid.dt
    j = np.arange(3, fn.grid.n_half - 3, 2)  # interior midpoints
    if j.size == 0:
        j = np.array([fn.grid.n_half // 2])
        j = j[(j >= 2) & (j <= fn.grid.n_half - 3)]
        if j.size == 0:
            return float("nan")
    deriv = (v[j - 2] - 8.0 * v[j - 1] + 8.0 * v[j + 1] - v[j + 2]) / (12.0 * h2)
    return float(np.max(np.abs(deriv - rhs_half[j])))
