"""Exact solvers for the structured-grid elliptic problems.

Everything here exploits the uniform tensor grid: the 5-point Dirichlet
Laplacian diagonalizes in the DST-I sine basis, and the temporal part of
the space-time operator (piecewise-linear time derivative with natural
boundary conditions) diagonalizes through a small dense generalized
eigenproblem.  Each solve is therefore a fixed sequence of orthogonal
transforms plus a diagonal division: deterministic, bitwise reproducible
at a fixed thread count, and accurate to machine precision, which keeps
the residual contracts of the callers trivially satisfied.

Operator conventions (hx*hy folded into the dual vectors):

* spatial stiffness L = 5-point (-Laplacian), eigenvalues
  4/h^2 sin^2(pi k / (2(n+1))) per axis;
* temporal stiffness K encodes int v_t w_t for piecewise-linear fields
  (tridiagonal, Neumann ends); W is the trapezoid weight diagonal;
* the space-time operator is  hx*hy * (K (x) I  +  W (x) L).
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.fft import dstn
from scipy.linalg import eigh

from .grid import SpaceTimeGrid
from .stencils import laplace

__all__ = [
    "sine_eigenvalues",
    "sine_transform",
    "poisson_solve",
    "shifted_poisson_solve",
    "time_stiffness",
    "time_weight_diag",
    "TimeBasis",
    "time_basis",
    "level_slice",
    "spacetime_elliptic_solve",
    "spacetime_solve_weak",
]

_WORKERS = 1


def sine_transform(a):
    """Orthonormal DST-I over the two trailing axes (self-inverse)."""
    return dstn(a, type=1, norm="ortho", axes=(-2, -1), workers=_WORKERS)


@lru_cache(maxsize=64)
def sine_eigenvalues(grid: SpaceTimeGrid):
    """(ny, nx) eigenvalues of the 5-point stiffness L."""
    kx = np.arange(1, grid.nx + 1)
    ky = np.arange(1, grid.ny + 1)
    lx = 4.0 / grid.hx**2 * np.sin(np.pi * kx / (2 * (grid.nx + 1))) ** 2
    ly = 4.0 / grid.hy**2 * np.sin(np.pi * ky / (2 * (grid.ny + 1))) ** 2
    out = ly[:, None] + lx[None, :]
    out.flags.writeable = False
    return out


def poisson_solve(grid, rhs):
    """Solve -lap g = rhs with homogeneous Dirichlet walls.

    Works on slices, space-time arrays and vector fields alike (the
    trailing two axes are spatial).  The discrete 5-point system is
    solved exactly, so the residual is at roundoff level.
    """
    rhs = np.asarray(rhs, dtype=float)
    if not np.isfinite(rhs).all():
        raise ValueError("poisson_solve: rhs contains non-finite values")
    lam = sine_eigenvalues(grid)
    return sine_transform(sine_transform(rhs) / lam)


def shifted_poisson_solve(grid, rhs, shift):
    """Solve (shift*I - lap) g = rhs, shift >= 0."""
    rhs = np.asarray(rhs, dtype=float)
    lam = sine_eigenvalues(grid)
    return sine_transform(sine_transform(rhs) / (lam + shift))


def time_stiffness(grid):
    """(nt+1)^2 matrix of int v_t w_t for piecewise-linear fields."""
    n = grid.nt + 1
    K = np.zeros((n, n))
    main = np.full(n, 2.0)
    main[0] = main[-1] = 1.0
    K[np.arange(n), np.arange(n)] = main
    K[np.arange(n - 1), np.arange(1, n)] = -1.0
    K[np.arange(1, n), np.arange(n - 1)] = -1.0
    return K / grid.ht


def time_weight_diag(grid):
    return grid.time_weights()


def level_slice(grid, fixed):
    """Unknown time levels for the given trace constraint.

    fixed='none'    -> all levels (natural/Neumann ends)
    fixed='initial' -> levels 1..nt (value pinned at t=0)
    fixed='both'    -> levels 1..nt-1 (pinned at t=0 and t=T)
    """
    if fixed == "none":
        return slice(0, grid.nt + 1)
    if fixed == "initial":
        return slice(1, grid.nt + 1)
    if fixed == "both":
        return slice(1, grid.nt)
    raise ValueError(f"unknown trace constraint {fixed!r}")


@dataclass(frozen=True)
class TimeBasis:
    """Generalized eigenbasis of (K_sub, W_sub): Z^T W Z = I, K Z = W Z diag(lam)."""

    levels: slice
    Z: np.ndarray
    lam: np.ndarray

    def to_modes(self, a):
        return np.einsum("km,k...->m...", self.Z, a)

    def from_modes(self, c):
        # Z^{-1} = Z^T W, so synthesis uses Z itself: a = Z c.
        return np.einsum("km,m...->k...", self.Z, c)


@lru_cache(maxsize=64)
def time_basis(grid: SpaceTimeGrid, fixed: str):
    sl = level_slice(grid, fixed)
    K = time_stiffness(grid)[sl, sl]
    W = np.diag(time_weight_diag(grid)[sl])
    lam, Z = eigh(K, W)
    lam = np.where(np.abs(lam) < 1e-13 / grid.ht, 0.0, lam)
    lam.flags.writeable = False
    Z.flags.writeable = False
    return TimeBasis(sl, Z, lam)


def _st_solve(grid, bvec, denom_of_mode, fixed):
    """Diagonalized solve of a space-time operator on the given levels.

    bvec: dual vector shaped (m_levels, ..., ny, nx).
    denom_of_mode(lam_m) must return the (ny, nx) diagonal of the
    transformed operator for temporal eigenvalue lam_m.
    """
    tb = time_basis(grid, fixed)
    c = tb.to_modes(np.asarray(bvec, dtype=float))
    chat = sine_transform(c)
    lamx = sine_eigenvalues(grid)
    denom = np.stack([denom_of_mode(lm, lamx) for lm in tb.lam])
    # broadcast the per-mode (ny, nx) denominators across component axes
    extra = chat.ndim - denom.ndim
    shape = (denom.shape[0],) + (1,) * extra + denom.shape[1:]
    chat /= denom.reshape(shape)
    return tb.from_modes(sine_transform(chat))


def spacetime_solve_weak(grid, bvec):
    """Solve the space-time operator in dual form: A v = bvec.

    A = hx*hy*(K (x) I + W (x) L) over all nt+1 levels (weak Neumann in
    time, Dirichlet walls); bvec is an assembled functional vector of
    shape (nt+1, ..., ny, nx).
    """
    area = grid.hx * grid.hy

    def denom(lm, lamx):
        return area * (lm + lamx)

    return _st_solve(grid, bvec, denom, "none")


def spacetime_elliptic_solve(grid, rhs):
    """Solve -v_tt - lap v = rhs on Q_T (field form).

    Lateral homogeneous Dirichlet, weak v_t = 0 at t in {0, T}.  The
    right-hand side is given pointwise on the nt+1 levels; it is tested
    with the trapezoid weights to form the weak problem.
    """
    rhs = np.asarray(rhs, dtype=float)
    if not np.isfinite(rhs).all():
        raise ValueError("spacetime_elliptic_solve: rhs contains non-finite values")
    w = grid.time_weights().reshape((-1,) + (1,) * (rhs.ndim - 1))
    bvec = grid.hx * grid.hy * w * rhs
    return spacetime_solve_weak(grid, bvec)


def spacetime_weak_residual(grid, v, bvec):
    """Relative residual ||A v - b|| / ||b|| of the weak system."""
    area = grid.hx * grid.hy
    K = time_stiffness(grid)
    w = grid.time_weights()
    Kv = np.einsum("kl,l...->k...", K, v)
    Lv = -laplace(v, grid, compact=True)
    wl = w.reshape((-1,) + (1,) * (v.ndim - 1))
    Av = area * (Kv + wl * Lv)
    nb = np.linalg.norm(bvec.ravel())
    if nb == 0.0:
        return float(np.linalg.norm(Av.ravel()))
    return float(np.linalg.norm((Av - bvec).ravel()) / nb)
