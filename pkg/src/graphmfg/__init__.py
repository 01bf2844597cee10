"""Mean field games on finite connected weighted graphs.

Subpackages by concern:

* ``graphs``   -- weighted graphs, the discrete transport calculus, the
  logarithmic mean and its derivatives, graph generators;
* ``models``   -- separable Lagrangian/Hamiltonian families, couplings,
  terminal costs, the derived forward-backward maps and structural checks;
* ``dynamics`` -- positivity-preserving continuity-equation integration and
  interiority probes;
* ``solver``   -- damped Picard iteration, homotopy continuation, shooting
  linearization and solver-level probes;
* ``master``   -- the value function, simplex derivatives, individual-noise
  operator and master-equation residuals;
* ``hjb``      -- the action functional, dual value computations and HJB
  certification probes;
* ``nash``     -- rate matrices, propagators, uniformized chain sampling,
  expected costs and the Nash certificate;
* ``cli``      -- the ``graphmfg`` experiment runner.
"""

from .graphs import WeightedGraph, cycle_graph, complete_graph, path_graph, torus_grid
from .models import GameSpec, SeparableModel, make_game

__all__ = [
    "WeightedGraph",
    "GameSpec",
    "SeparableModel",
    "make_game",
    "path_graph",
    "cycle_graph",
    "complete_graph",
    "torus_grid",
]

__version__ = "0.1.0"
