"""Structured-grid calculus, quadrature and exact elliptic solvers."""

from .a0 import METRICS, a0_velocity_riesz, inner_a0, velocity_a0_inner
from .elliptic import (
    TimeBasis,
    level_slice,
    poisson_solve,
    shifted_poisson_solve,
    sine_eigenvalues,
    sine_transform,
    spacetime_elliptic_solve,
    spacetime_solve_weak,
    spacetime_weak_residual,
    time_basis,
    time_stiffness,
    time_weight_diag,
)
from .grid import ScalarField, SpaceTimeGrid, SpatialGrid, SupportMask, Triplet, VectorField
from .stencils import (
    curl,
    div,
    dt_pairing,
    dt_sq_integral,
    dx,
    dy,
    grad,
    grad_pressure,
    grad_pressure_transpose,
    h1_seminorm_sq,
    laplace,
    quadrature_l2,
    remove_slice_means,
    slice_means,
    space_inner,
    st_h1_pairing,
    st_h1_seminorm_sq,
    st_inner,
    trace_norms,
)

__all__ = [
    "METRICS",
    "ScalarField",
    "SpaceTimeGrid",
    "SpatialGrid",
    "SupportMask",
    "TimeBasis",
    "Triplet",
    "VectorField",
    "a0_velocity_riesz",
    "curl",
    "div",
    "dt_pairing",
    "dt_sq_integral",
    "dx",
    "dy",
    "grad",
    "grad_pressure",
    "grad_pressure_transpose",
    "h1_seminorm_sq",
    "inner_a0",
    "laplace",
    "level_slice",
    "poisson_solve",
    "quadrature_l2",
    "remove_slice_means",
    "shifted_poisson_solve",
    "sine_eigenvalues",
    "sine_transform",
    "slice_means",
    "space_inner",
    "spacetime_elliptic_solve",
    "spacetime_solve_weak",
    "spacetime_weak_residual",
    "st_h1_pairing",
    "st_h1_seminorm_sq",
    "st_inner",
    "time_basis",
    "time_stiffness",
    "time_weight_diag",
    "trace_norms",
    "velocity_a0_inner",
]
