"""The graph-type inner product on admissible increments.

For a triplet direction u = (y, pi, f) the squared norm is

    ||y||^2_{L2(Q_T)} + ||grad y||^2_{L2(Q_T)}
  + int_0^T ||y_t||^2_{H^-1} dt  +  ||f||^2_{L2(q_T)} + ||pi||^2_{L2(Q_T)},

with the H^-1 term realized through one Poisson solve per time interval
applied to the piecewise-constant discrete y_t.  The cheaper
"simplified" metric replaces that term by the ht^2-weighted L2 norm of
y_t; it changes descent paths but not stationary points.

In degrees-of-freedom form the metric is

    hx*hy * ( W (x) (I + L)  +  K (x) L^-1 )        (a0_exact)
    hx*hy * ( W (x) (I + L)  +  ht^2 K (x) I )      (simplified)

which diagonalizes in the same sine/temporal eigenbasis as the
space-time corrector operator, so Riesz solves are exact.
"""

import numpy as np

from .elliptic import (
    _st_solve,
    poisson_solve,
)
from .grid import Triplet
from .stencils import st_h1_seminorm_sq, st_inner

__all__ = ["METRICS", "inner_a0", "a0_velocity_riesz", "velocity_a0_inner"]

METRICS = ("a0_exact", "simplified")


def _check_metric(metric):
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def _dt_slopes(y, grid):
    return np.diff(y, axis=0) / grid.ht


def velocity_a0_inner(y1, y2, grid, metric="a0_exact"):
    """A0 pairing of the velocity parts only."""
    _check_metric(metric)
    val = st_inner(y1, y2, grid)
    # grad pairing through polarization of the edge form
    plus = st_h1_seminorm_sq(np.asarray(y1) + np.asarray(y2), grid)
    minus = st_h1_seminorm_sq(np.asarray(y1) - np.asarray(y2), grid)
    val += 0.25 * (plus - minus)
    d1 = _dt_slopes(y1, grid)
    d2 = _dt_slopes(y2, grid)
    if metric == "a0_exact":
        g1 = poisson_solve(grid, d1)
        val += grid.ht * grid.hx * grid.hy * float(np.sum(g1 * d2))
    else:
        val += grid.ht**3 * grid.hx * grid.hy * float(np.sum(d1 * d2))
    return val


def inner_a0(u1: Triplet, u2: Triplet, metric="a0_exact"):
    """Full A0 inner product of two triplet directions on one grid."""
    if u1.grid != u2.grid:
        raise ValueError("triplets live on different grids")
    grid = u1.grid
    val = velocity_a0_inner(u1.y, u2.y, grid, metric)
    val += st_inner(u1.f, u2.f, grid)
    val += st_inner(u1.pi, u2.pi, grid)
    return val


def a0_velocity_riesz(grid, rvec, fixed, metric="a0_exact"):
    """Solve M ybar = rvec for the velocity block of the A0 metric.

    rvec is an assembled dual vector on the unknown time levels (shape
    (m, 2, ny, nx)); the trace constraint 'fixed' selects those levels.
    Returns the representer on the same levels.
    """
    _check_metric(metric)
    area = grid.hx * grid.hy
    ht2 = grid.ht**2

    if metric == "a0_exact":

        def denom(lm, lamx):
            return area * (1.0 + lamx + lm / lamx)

    else:

        def denom(lm, lamx):
            return area * (1.0 + lamx + ht2 * lm)

    return _st_solve(grid, rvec, denom, fixed)
