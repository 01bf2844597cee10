"""Compiled inner sweeps for the Picard iteration.

The forward density sweep evaluates the logarithmic-mean mobility at every
RK4 stage, which dominates the solver profile when done with small-array
numpy; these scalar-loop versions are compiled with numba when available.
``solver`` falls back to the pure-numpy path if the import fails, so the
kernels must stay behaviourally identical to it.
"""
from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a soft dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        if args and callable(args[0]):
            return args[0]
        return wrap


# series coefficients of G(z) = z / artanh(z); see graphs.py
_G0 = 1.0
_G1 = -1.0 / 3.0
_G2 = -4.0 / 45.0
_G3 = -44.0 / 945.0
_G4 = -428.0 / 14175.0
_G5 = -10196.0 / 467775.0
_G6 = -10719068.0 / 638512875.0
_G7 = -25865068.0 / 1915538625.0


@njit(cache=True)
def _theta_scalar(r, s):
    a = 0.5 * (r + s)
    if a <= 0.0:
        return 0.0
    z = (r - s) / (2.0 * a)
    if abs(z) < 0.1:
        u = z * z
        g = ((((((_G7 * u + _G6) * u + _G5) * u + _G4) * u + _G3) * u + _G2)
             * u + _G1) * u + _G0
        return a * g
    if r <= 0.0 or s <= 0.0:
        return 0.0
    return (r - s) / np.log(r / s)


@njit(cache=True)
def _density_rhs(y, hp_row, ei, ej, sqw_e, om_e, beta, out):
    n = y.shape[0]
    m = ei.shape[0]
    for i in range(n):
        out[i] = 0.0
    ext = 1.0
    if beta != 0.0:
        yy = 0.0
        for i in range(n):
            yy += y[i] * y[i]
        ext = 1.0 + beta * yy
    for e in range(m):
        i = ei[e]
        j = ej[e]
        b = -_theta_scalar(y[i], y[j]) * hp_row[e] * ext
        out[i] -= sqw_e[e] * b
        out[j] += sqw_e[e] * b
        diff = om_e[e] * (y[j] - y[i])
        out[i] += diff
        out[j] -= diff


@njit(cache=True)
def forward_density_sweep(mu, dt, n_steps, ei, ej, sqw_e, om_e, hp_e,
                          beta, floor):
    """RK4 density sweep with Hermite midpoint fill.

    ``hp_e`` holds the frozen h'(-lam * grad phi) edge values on the half
    grid.  Returns (values, ok); ok = False signals a stage state at or
    below the positivity floor, in which case the caller must fall back to
    the rejection-halving integrator.
    """
    n = mu.shape[0]
    values = np.empty((2 * n_steps + 1, n))
    y = mu.copy()
    for i in range(n):
        values[0, i] = mu[i]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    k1n = np.empty(n)
    stage = np.empty(n)
    y_next = np.empty(n)
    _density_rhs(y, hp_e[0], ei, ej, sqw_e, om_e, beta, k1)
    for k in range(n_steps):
        j = 2 * k
        for i in range(n):
            stage[i] = y[i] + 0.5 * dt * k1[i]
            if stage[i] <= floor:
                return values, False
        _density_rhs(stage, hp_e[j + 1], ei, ej, sqw_e, om_e, beta, k2)
        for i in range(n):
            stage[i] = y[i] + 0.5 * dt * k2[i]
            if stage[i] <= floor:
                return values, False
        _density_rhs(stage, hp_e[j + 1], ei, ej, sqw_e, om_e, beta, k3)
        for i in range(n):
            stage[i] = y[i] + dt * k3[i]
            if stage[i] <= floor:
                return values, False
        _density_rhs(stage, hp_e[j + 2], ei, ej, sqw_e, om_e, beta, k4)
        for i in range(n):
            y_next[i] = y[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i]
                                             + 2.0 * k3[i] + k4[i])
            if y_next[i] <= floor:
                return values, False
        _density_rhs(y_next, hp_e[j + 2], ei, ej, sqw_e, om_e, beta, k1n)
        for i in range(n):
            values[j + 1, i] = 0.5 * (y[i] + y_next[i]) \
                + (dt / 8.0) * (k1[i] - k1n[i])
            values[j + 2, i] = y_next[i]
            y[i] = y_next[i]
            k1[i] = k1n[i]
    return values, True


@njit(cache=True)
def backward_potential_sweep(terminal, dt, n_steps, omega, deg, src):
    """RK4 sweep of phi' = src(s) - lap phi from the terminal condition."""
    n = terminal.shape[0]
    values = np.empty((2 * n_steps + 1, n))
    y = terminal.copy()
    for i in range(n):
        values[2 * n_steps, i] = terminal[i]

    def rhs(j, yy, out):
        for i in range(n):
            acc = src[j, i] + deg[i] * yy[i]
            for l in range(n):
                acc -= omega[i, l] * yy[l]
            out[i] = acc

    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    k1p = np.empty(n)
    stage = np.empty(n)
    y_prev = np.empty(n)
    rhs(2 * n_steps, y, k1)
    for k in range(n_steps - 1, -1, -1):
        j = 2 * k
        for i in range(n):
            stage[i] = y[i] - 0.5 * dt * k1[i]
        rhs(j + 1, stage, k2)
        for i in range(n):
            stage[i] = y[i] - 0.5 * dt * k2[i]
        rhs(j + 1, stage, k3)
        for i in range(n):
            stage[i] = y[i] - dt * k3[i]
        rhs(j, stage, k4)
        for i in range(n):
            y_prev[i] = y[i] - (dt / 6.0) * (k1[i] + 2.0 * k2[i]
                                             + 2.0 * k3[i] + k4[i])
        rhs(j, y_prev, k1p)
        for i in range(n):
            values[j + 1, i] = 0.5 * (y[i] + y_prev[i]) \
                + (dt / 8.0) * (k1p[i] - k1[i])
            values[j, i] = y_prev[i]
            y[i] = y_prev[i]
            k1[i] = k1p[i]
    return values
