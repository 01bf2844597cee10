"""Figure rendering for the report path.

Every suite drops PNG figures next to its CSV/JSON outputs: density and
potential trajectories, the fitted interiority envelope, residual-order
decay, deviation-gap spectra, and the torus admissibility sweep.  The CSV
and JSON files remain the machine contract; figures are for eyes.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "density_figure",
    "envelope_figure",
    "solution_figure",
    "residual_order_figure",
    "deviation_gaps_figure",
    "torus_margin_figure",
    "minimizer_figure",
]


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def density_figure(times, rho, path, title="density trajectory"):
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    rho = np.asarray(rho)
    for i in range(rho.shape[1]):
        ax.plot(times, rho[:, i], lw=1.2, label=f"vertex {i + 1}")
    ax.set_xlabel("s")
    ax.set_ylabel("density")
    ax.set_title(title)
    if rho.shape[1] <= 8:
        ax.legend(fontsize=8, ncol=2)
    _save(fig, path)


def envelope_figure(times, min_profile, c, r, eps, path):
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    times = np.asarray(times)
    ax.semilogy(times, min_profile, lw=1.4, label="min density")
    ax.semilogy(times, c * eps * np.exp(-r * times), "--", lw=1.2,
                label=f"envelope c={c:.3g}, r={r:.3g}")
    ax.set_xlabel("s (from start)")
    ax.set_ylabel("min density")
    ax.set_title("interiority envelope")
    ax.legend(fontsize=8)
    _save(fig, path)


def solution_figure(nodes, phi, rho, path):
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 3.4))
    for i in range(phi.shape[1]):
        axes[0].plot(nodes, phi[:, i], lw=1.1)
        axes[1].plot(nodes, rho[:, i], lw=1.1)
    axes[0].set_title("potential")
    axes[1].set_title("density")
    for ax in axes:
        ax.set_xlabel("s")
    _save(fig, path)


def residual_order_figure(h_values, residuals, path, title="residual decay"):
    fig, ax = plt.subplots(figsize=(4.6, 3.6))
    h_values = np.asarray(h_values, dtype=float)
    residuals = np.asarray(residuals, dtype=float)
    ax.loglog(h_values, residuals, "o-", label="observed")
    ref = residuals[0] * (h_values / h_values[0]) ** 2
    ax.loglog(h_values, ref, "--", label="order 2")
    ax.set_xlabel("h")
    ax.set_ylabel("residual")
    ax.set_title(title)
    ax.legend(fontsize=8)
    _save(fig, path)


def deviation_gaps_figure(gaps, path):
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    norms = [g["a_norm"] for g in gaps]
    vals = [g["gap"] for g in gaps]
    ax.scatter(norms, vals, s=12, alpha=0.7)
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xlabel("|a|")
    ax.set_ylabel("cost gap vs equilibrium")
    ax.set_title("unilateral deviation gaps")
    _save(fig, path)


def torus_margin_figure(entries, path):
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    ns = [e["n"] for e in entries]
    margins = [e["margin"] for e in entries]
    ax.plot(ns, margins, "o-")
    ax.set_xlabel("torus points n (weight n^2)")
    ax.set_ylabel("min off-diagonal rate")
    ax.set_title("admissibility margin vs mesh")
    _save(fig, path)


def minimizer_figure(nodes, rho, path):
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for i in range(rho.shape[1]):
        ax.plot(nodes, rho[:, i], lw=1.1, label=f"vertex {i + 1}")
    ax.set_xlabel("s")
    ax.set_ylabel("density")
    ax.set_title("action-minimizing density path")
    if rho.shape[1] <= 8:
        ax.legend(fontsize=8, ncol=2)
    _save(fig, path)
