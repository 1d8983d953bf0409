"""Simulator and verification harness for a local-sensing chemotaxis system.

The package integrates the coupled density/signal equations with an
identity-preserving implicit scheme, co-evolves the auxiliary fields whose
structural identities and comparison bounds characterize the dynamics, and
reports margins and residuals for all of them.
"""

from .grid import Field, FieldReduction, Grid, combine, constant_field, make_grid, reduce
from .motility import MotilityFunction, big_gamma, classify, gamma_eval, make_motility
from .operators import NeumannOperators, SolverError
from .evolution import SolverConfig, State, Trajectory, init_state, run, step

__version__ = "0.1.0"

__all__ = [
    "Field",
    "FieldReduction",
    "Grid",
    "MotilityFunction",
    "NeumannOperators",
    "SolverConfig",
    "SolverError",
    "State",
    "Trajectory",
    "big_gamma",
    "classify",
    "combine",
    "constant_field",
    "gamma_eval",
    "init_state",
    "make_grid",
    "make_motility",
    "reduce",
    "run",
    "step",
    "__version__",
]
