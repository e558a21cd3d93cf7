"""lsqctrl: least-squares variational solvers for unsteady Stokes null
control and the steady Navier-Stokes direct problem on structured grids.

The library is organized around a single idea: encode the boundary,
initial and target conditions into the ansatz, then measure how far a
candidate is from solving the system by the energy of an elliptic
corrector, and minimize that quadratic (or quartic, for the steady
nonlinear case) energy by metric-preconditioned descent.

Modules
-------
abstract_descent
    Dense engine for quadratic error functionals over subspaces, with
    exact kernel projectors and pseudoinverse minimizers as oracles.
discretization
    Structured-grid calculus, quadrature and exact sine/eigenbasis
    solvers for the Poisson, space-time elliptic and metric problems.
stokes_control
    The unsteady solver: corrector, energy, metric gradient, descent,
    diagnostics, and the alternating heat-control/pressure-update
    scheme.
steady_nse
    The steady Navier-Stokes direct problem by the same approach.
oracles
    Manufactured solutions, independent dense assembly, FD ladders and
    an independent Newton solve for verification.
cli
    Batch front end (``lsqctrl`` console script).
"""

from . import abstract_descent, cli, discretization, oracles, steady_nse, stokes_control
from .abstract_descent import (
    DescentConfig,
    DescentReport,
    InnerProductSpace,
    LsqProblem,
)
from .discretization import SpaceTimeGrid, SpatialGrid, SupportMask, Triplet
from .steady_nse import SteadyConfig, SteadyProblem, SteadyState
from .stokes_control import ControlProblem, CorrectorField, SolveConfig

__version__ = "0.1.0"

__all__ = [
    "ControlProblem",
    "CorrectorField",
    "DescentConfig",
    "DescentReport",
    "InnerProductSpace",
    "LsqProblem",
    "SolveConfig",
    "SpaceTimeGrid",
    "SpatialGrid",
    "SteadyConfig",
    "SteadyProblem",
    "SteadyState",
    "SupportMask",
    "Triplet",
    "abstract_descent",
    "cli",
    "discretization",
    "oracles",
    "steady_nse",
    "stokes_control",
]
