"""Least-squares solver for the unsteady Stokes system.

A candidate triplet s = (y, pi, f) carries the velocity, pressure and
the control density; the traces y(.,0) = y0 (and y(.,T) = 0 for null
control) as well as the lateral boundary condition are built into the
ansatz, so every iterate satisfies them exactly.  How far s is from
actually solving the system is measured by the quadratic functional

    E(s) = 1/2 int_QT ( |v_t|^2 + |grad v|^2 + |div y + eps*pi|^2 ),

where the corrector v solves the space-time elliptic problem driven by
the momentum residual of s.  Minimization runs over the affine manifold
s_A + (zero-trace increments), by steepest descent in the graph metric
of the increment space; the metric makes the preconditioned problem
well scaled, and the update directions have closed-form pressure and
control components (the divergence and the restriction of the
corrector).

The exact projection onto the orthogonal complement of the kernel of
the residual map is itself a controllability problem and is not
computed at PDE scale; the descent instead monitors the kernel ratio
||T g|| / ||g|| and stops when the direction is essentially invisible
to the functional.  The dense engine in ``abstract_descent`` retains
the exact projector so projection semantics stay tested at small scale.
"""

from dataclasses import dataclass, field

import numpy as np

from .abstract_descent import DescentReport
from .discretization import (
    SpaceTimeGrid,
    SupportMask,
    Triplet,
    a0_velocity_riesz,
    div,
    dt_sq_integral,
    grad,
    grad_pressure,
    grad_pressure_transpose,
    laplace,
    level_slice,
    remove_slice_means,
    shifted_poisson_solve,
    slice_means,
    space_inner,
    spacetime_solve_weak,
    st_h1_seminorm_sq,
    st_inner,
    trace_norms,
)

__all__ = [
    "ControlProblem",
    "CorrectorField",
    "SolveConfig",
    "DescentDivergence",
    "lift_sA",
    "corrector",
    "energy",
    "first_variation",
    "gradient_a0",
    "apply_T",
    "descend",
    "diagnostics",
    "split_iteration",
    "pressure_update_step",
    "pressure_stationary_point",
    "SplitReport",
]

MODES = ("null_control", "direct")

# global sign of the Riesz gradient components relative to the corrector:
# pi-bar = SIGMA * (adjoint divergence of v) and f-bar = SIGMA * v|_omega.
# Fixed once by the finite-difference oracle (tests/fixtures records the
# resolution); the descent diverges immediately if it were flipped.
SIGMA = +1.0


class DescentDivergence(RuntimeError):
    """Energy increased beyond roundoff slack: gradient/metric bug."""


@dataclass
class ControlProblem:
    """Data of one unsteady solve.

    y0 is the initial velocity on the interior nodes (the boundary trace
    of the continuous datum must vanish; eliminated nodes carry that).
    mode 'null_control' pins y(.,T) = 0 into the ansatz, 'direct' leaves
    the final slice free and keeps the control f frozen.
    """

    grid: SpaceTimeGrid
    nu: float
    y0: np.ndarray
    mask: SupportMask
    mode: str = "null_control"
    epsilon: float = 0.0
    metric: str = "a0_exact"

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("viscosity must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        from .discretization import METRICS

        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        self.y0 = np.asarray(self.y0, dtype=float)
        if self.y0.shape != (2, self.grid.ny, self.grid.nx):
            raise ValueError("y0 must be a velocity slice (2, ny, nx)")
        if not np.isfinite(self.y0).all():
            raise ValueError("y0 contains non-finite values")
        self.mask.validate(self.grid)
        self._mask_arr = self.mask.indicator(self.grid)

    @property
    def fixed_traces(self):
        return "both" if self.mode == "null_control" else "initial"

    def mask_array(self):
        return self._mask_arr


@dataclass
class CorrectorField:
    v: np.ndarray
    weak_residual_norm: float


@dataclass
class SolveConfig:
    max_iter: int = 200
    tol_energy: float = 0.0          # absolute threshold on E
    tol_energy_rel: float = 0.0      # relative to E at the starting point
    tol_grad: float = 0.0            # relative to the first gradient norm
    tol_kernel: float = 0.0          # threshold on ||T g||_Y / ||g||_A0
    refresh_every: int = 50
    algorithm: str = "steepest"      # "steepest" or "cg"
    # split-scheme knobs
    inner_max_iter: int = 150
    inner_tol_grad: float = 1e-3

    def __post_init__(self):
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")
        if self.algorithm not in ("steepest", "cg"):
            raise ValueError("algorithm must be 'steepest' or 'cg'")
        for name in ("tol_energy", "tol_energy_rel", "tol_grad", "tol_kernel"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


# ---------------------------------------------------------------------------
# residual assembly
# ---------------------------------------------------------------------------

def _dt_weak_vector(y, grid):
    """Dual vector in the test function w of int y_t . w.

    y is piecewise linear in time, so y_t is piecewise constant; exact
    integration against a piecewise-linear w gives the centered pairing
    with one-sided halves at the two endpoints.
    """
    out = np.empty_like(y)
    out[0] = 0.5 * (y[1] - y[0])
    out[1:-1] = 0.5 * (y[2:] - y[:-2])
    out[-1] = 0.5 * (y[-1] - y[-2])
    return grid.hx * grid.hy * out


def _dt_adjoint_vector(v, grid):
    """Dual vector in the direction Y of int Y_t . v (exact transpose)."""
    out = np.empty_like(v)
    out[0] = -0.5 * (v[0] + v[1])
    out[1:-1] = 0.5 * (v[:-2] - v[2:])
    out[-1] = 0.5 * (v[-2] + v[-1])
    return grid.hx * grid.hy * out


def _residual_vector(p: ControlProblem, y, pi, f, include_control=True):
    """Assembled momentum residual functional r(s)[w] over all levels.

    r = y_t pairing + nu grad:grad + pressure gradient - control; the
    corrector right-hand side is b = -r.
    """
    grid = p.grid
    area = grid.hx * grid.hy
    w = grid.time_weights()[:, None, None, None]
    r = _dt_weak_vector(y, grid)
    r -= p.nu * area * w * laplace(y, grid, compact=True)
    r += area * w * grad_pressure(pi, grid)
    if include_control:
        r -= area * w * (p.mask_array() * f)
    return r


def _corrector_rhs(p, s: Triplet):
    return -_residual_vector(p, s.y, s.pi, s.f)


def corrector(p: ControlProblem, s: Triplet) -> CorrectorField:
    """Space-time corrector of s: the elliptic lift of the weak residual."""
    b = _corrector_rhs(p, s)
    v = spacetime_solve_weak(p.grid, b)
    energy_sq = max(float(np.sum(v * b)), 0.0)
    return CorrectorField(v, np.sqrt(energy_sq))


def _div_part(p, s: Triplet):
    q = div(s.y, p.grid)
    if p.epsilon:
        q = q + p.epsilon * s.pi
    return q


def lift_sA(p: ControlProblem) -> Triplet:
    """Admissible base point: y0 transported by a scalar time profile.

    eta(t) = 1 - t/T in null-control mode (both traces exact), eta = 1
    for the direct problem.
    """
    grid = p.grid
    if p.mode == "null_control":
        eta = 1.0 - grid.ts() / grid.T_final
    else:
        eta = np.ones(grid.nt + 1)
    s = Triplet.zeros(grid)
    s.y = eta[:, None, None, None] * p.y0[None]
    return s


def energy(p: ControlProblem, s: Triplet, corr: CorrectorField | None = None):
    """E(s) >= 0; zero iff the corrector vanishes and div y + eps*pi = 0."""
    corr = corr or corrector(p, s)
    q = _div_part(p, s)
    return 0.5 * (
        dt_sq_integral(corr.v, p.grid)
        + st_h1_seminorm_sq(corr.v, p.grid)
        + st_inner(q, q, p.grid)
    )


def _check_direction(p, d: Triplet):
    sl = level_slice(p.grid, p.fixed_traces)
    lo, hi = sl.indices(p.grid.nt + 1)[:2]
    if np.abs(d.y[:lo]).max(initial=0.0) > 0 or np.abs(d.y[hi:]).max(initial=0.0) > 0:
        raise ValueError("direction must have homogeneous velocity traces")


def first_variation(p: ControlProblem, s: Triplet, d: Triplet, corr=None):
    """<E'(s), d> evaluated with s's corrector only (no solve for d).

    Expands to the boundary-free pairing of the direction against the
    corrector plus the divergence coupling; algebraically identical to
    b(d) . v(s) + <div y + eps pi, div Y + eps Pi>.
    """
    _check_direction(p, d)
    corr = corr or corrector(p, s)
    bd = -_residual_vector(p, d.y, d.pi, d.f, include_control=p.mode == "null_control")
    val = float(np.sum(bd * corr.v))
    q = _div_part(p, s)
    qd = _div_part(p, d)
    return val + st_inner(q, qd, p.grid)


def apply_T(p: ControlProblem, d: Triplet):
    """Image of a direction: its corrector paired with div Y + eps*Pi."""
    _check_direction(p, d)
    bd = -_residual_vector(p, d.y, d.pi, d.f, include_control=p.mode == "null_control")
    v = spacetime_solve_weak(p.grid, bd)
    energy_sq = max(float(np.sum(v * bd)), 0.0)
    return CorrectorField(v, np.sqrt(energy_sq)), _div_part(p, d)


def _image_norm_sq(p, corr: CorrectorField, qd):
    return corr.weak_residual_norm**2 + st_inner(qd, qd, p.grid)


def gradient_a0(p: ControlProblem, s: Triplet, corr=None, div_weight=1.0,
                freeze_pressure=False, return_norm=False):
    """Riesz representative of E'(s) in the increment metric.

    Pressure and control components are closed-form: the adjoint
    divergence of the corrector and its restriction to the support
    (global sign SIGMA, resolved by the finite-difference oracle).  The
    velocity component solves the metric problem with the H^-1 term
    when metric='a0_exact'.
    """
    grid = p.grid
    corr = corr or corrector(p, s)
    v = corr.v
    area = grid.hx * grid.hy
    w = grid.time_weights()[:, None, None, None]
    q = _div_part(p, s) if div_weight else np.zeros_like(s.pi)

    g = Triplet.zeros(grid)
    if not freeze_pressure:
        pibar = SIGMA * (-grad_pressure_transpose(v, grid))
        if p.epsilon and div_weight:
            pibar = pibar + p.epsilon * q
        g.pi = remove_slice_means(pibar)
    if p.mode == "null_control":
        g.f = SIGMA * (p.mask_array() * v)

    rvec = -_dt_adjoint_vector(v, grid)
    rvec += p.nu * area * w * laplace(v, grid, compact=True)
    if div_weight:
        rvec -= area * w * grad(q, grid)
    sl = level_slice(grid, p.fixed_traces)
    ybar = a0_velocity_riesz(grid, rvec[sl], p.fixed_traces, p.metric)
    g.y[sl] = ybar

    if not return_norm:
        return g
    norm_sq = float(np.sum(rvec[sl] * ybar))
    norm_sq += st_inner(g.pi, g.pi, grid) + st_inner(g.f, g.f, grid)
    return g, max(norm_sq, 0.0)


def diagnostics(p: ControlProblem, s: Triplet, corr=None):
    """Constraint and residual norms of a candidate triplet."""
    grid = p.grid
    corr = corr or corrector(p, s)
    dv = div(s.y, grid)
    err0 = s.y[0] - p.y0
    return {
        "div_norm": np.sqrt(st_inner(dv, dv, grid)),
        "trace0_error": np.sqrt(space_inner(err0, err0, grid)),
        "traceT_norm": trace_norms(s.y, grid)[1],
        "weak_residual": corr.weak_residual_norm,
        "f_norm": np.sqrt(st_inner(s.f, s.f, grid)),
        "pressure_means": slice_means(s.pi),
    }


# ---------------------------------------------------------------------------
# steepest descent
# ---------------------------------------------------------------------------

def descend(p: ControlProblem, cfg: SolveConfig, s_init: Triplet | None = None,
            _div_weight=1.0, _freeze_pressure=False):
    """Minimizing sequence s_k = s_A + u_k driven by the metric gradient.

    algorithm='steepest' updates u_{k+1} = u_k - eta_k g_k with the
    exact line-search step; 'cg' recombines successive gradients into
    conjugate directions (restarted on any roundoff-level energy
    increase), which resolves the flat tail of the quadratic in far
    fewer corrector solves while keeping the energy non-increasing and
    the trace/support constraints exact.  Terminates on the absolute or
    relative energy target, the relative gradient target, the
    kernel-ratio criterion, or max_iter.
    """
    grid = p.grid
    s = (s_init or lift_sA(p)).copy()
    corr = corrector(p, s)
    q = _div_part(p, s) * _div_weight

    energies, gnorms, steps, ratios = [], [], [], []
    div_norms, yT_norms, f_norms = [], [], []
    converged, reason = False, "max_iter"
    e0 = g0 = None
    pdir = None
    gn_sq_prev = pn_sq_prev = None
    restarted = False

    def current_energy():
        return 0.5 * (
            dt_sq_integral(corr.v, grid)
            + st_h1_seminorm_sq(corr.v, grid)
            + st_inner(q, q, grid)
        )

    for it in range(cfg.max_iter + 1):
        if cfg.refresh_every and it and it % cfg.refresh_every == 0:
            s.pi = remove_slice_means(s.pi)
            corr = corrector(p, s)
            q = _div_part(p, s) * _div_weight
        e = current_energy()
        if energies and e > energies[-1] * (1 + 1e-12) + 1e-14 * max(e0, 1e-300):
            if cfg.algorithm == "cg" and not restarted:
                # conjugacy lost to roundoff: fall back to a pure
                # gradient step before declaring divergence
                pdir, restarted = None, True
            else:
                raise DescentDivergence(
                    f"energy increased at iteration {it}: {energies[-1]} -> {e}"
                )
        g, gn_sq = gradient_a0(
            p, s, corr, div_weight=_div_weight,
            freeze_pressure=_freeze_pressure, return_norm=True,
        )
        gn = np.sqrt(gn_sq)
        energies.append(e)
        gnorms.append(gn)
        dv = div(s.y, grid)
        div_norms.append(np.sqrt(st_inner(dv, dv, grid)))
        yT_norms.append(trace_norms(s.y, grid)[1])
        f_norms.append(np.sqrt(st_inner(s.f, s.f, grid)))
        if e0 is None:
            e0, g0 = e, gn

        if e <= cfg.tol_energy or (cfg.tol_energy_rel and e <= cfg.tol_energy_rel * e0):
            converged, reason = True, "energy_tol"
            break
        if cfg.tol_grad and gn <= cfg.tol_grad * g0:
            converged, reason = True, "grad_tol"
            break
        if it == cfg.max_iter:
            break

        if cfg.algorithm == "cg" and pdir is not None and gn_sq_prev:
            beta = gn_sq / gn_sq_prev
            step_dir = g.copy()
            step_dir.axpy(beta, pdir)
            # exact-search CG keeps <g_k, p_{k-1}>_A0 = 0, so the
            # directional derivative and direction norm recurse cheaply
            dd = gn_sq
            pn_sq = gn_sq + beta**2 * pn_sq_prev
        else:
            step_dir = g
            dd = gn_sq
            pn_sq = gn_sq
        gn_sq_prev, pn_sq_prev = gn_sq, pn_sq

        bg = -_residual_vector(p, step_dir.y, step_dir.pi, step_dir.f,
                               include_control=p.mode == "null_control")
        Vg = spacetime_solve_weak(grid, bg)
        qg = _div_part(p, step_dir) * _div_weight
        tg_sq = max(float(np.sum(Vg * bg)), 0.0) + st_inner(qg, qg, grid)
        ratio = np.sqrt(tg_sq / pn_sq) if pn_sq > 0 else 0.0
        ratios.append(ratio)
        if (cfg.tol_kernel and ratio <= cfg.tol_kernel) or tg_sq <= 1e-28 * gn_sq:
            converged, reason = True, "kernel_stall"
            break

        eta = dd / tg_sq
        steps.append(eta)
        s.axpy(-eta, step_dir)
        corr.v -= eta * Vg
        q -= eta * qg
        pdir = step_dir if cfg.algorithm == "cg" else None
    corr.weak_residual_norm = np.sqrt(
        max(dt_sq_integral(corr.v, grid) + st_h1_seminorm_sq(corr.v, grid), 0.0)
    )

    report = DescentReport(
        iterates_count=len(energies),
        energies=np.array(energies),
        grad_norms=np.array(gnorms),
        final_u=None,
        converged=converged,
        reason=reason,
        steps=np.array(steps),
        kernel_ratios=np.array(ratios),
        extras={
            "div_norms": np.array(div_norms),
            "yT_norms": np.array(yT_norms),
            "f_norms": np.array(f_norms),
            "corrector": corr,
        },
    )
    return s, report


# ---------------------------------------------------------------------------
# split scheme: heat-control inner solve, adjoint pressure update
# ---------------------------------------------------------------------------

@dataclass
class SplitReport:
    outer_G: np.ndarray          # divergence cost before each pressure step
    outer_G_after: np.ndarray    # after the accepted backtracked step
    outer_grad_norms: np.ndarray
    outer_steps: np.ndarray
    inner_reports: list
    converged: bool
    reason: str
    extras: dict = field(default_factory=dict)


def _heat_forward(p: ControlProblem, pi, f):
    """Implicit-Euler solve of y_t - nu lap y = f 1_omega - grad pi, y(0)=y0."""
    grid = p.grid
    nu_ht = p.nu * grid.ht
    mask = p.mask_array()
    gp = grad_pressure(pi, grid)
    y = grid.vector_zeros()
    y[0] = p.y0
    for k in range(grid.nt):
        rhs = y[k] + grid.ht * (mask[k + 1] * f[k + 1] - gp[k + 1])
        y[k + 1] = shifted_poisson_solve(grid, rhs / nu_ht, shift=1.0 / nu_ht)
    return y


def _div_cost(p, y):
    dv = div(y, p.grid)
    return 0.5 * st_inner(dv, dv, p.grid), dv


def _pressure_cost_gradient(p: ControlProblem, y):
    """L2(0,T;U)-Riesz gradient of G(pi) = 1/2 ||div y(pi)||^2.

    Exact adjoint of the implicit-Euler forward map: one backward heat
    solve (implicit Euler reversed, vanishing beyond t=T), then the
    one-sided pressure stencil transposed.  Matches central differences
    of G to roundoff because G is quadratic in pi.
    """
    grid = p.grid
    area = grid.hx * grid.hy
    w = grid.time_weights()
    nu_ht = p.nu * grid.ht
    dv = div(y, grid)
    r = -area * w[:, None, None, None] * grad(dv, grid)
    padj = np.zeros_like(y)
    nxt = np.zeros_like(y[0])
    for k in range(grid.nt, 0, -1):
        padj[k] = shifted_poisson_solve(grid, (nxt + r[k]) / nu_ht, shift=1.0 / nu_ht)
        nxt = padj[k]
    gbar = np.zeros_like(dv)
    gbar[1:] = -grid.ht * grad_pressure_transpose(padj[1:], grid) / (
        area * w[1:, None, None]
    )
    return remove_slice_means(gbar)


def pressure_update_step(p: ControlProblem, pi, f, eta_init=1.0,
                         armijo_c=1e-4, step_min=1e-14):
    """One backtracked gradient step of the divergence cost at frozen f.

    Returns (new_pi, info); info carries G before/after, the gradient
    norm and the accepted step (0 when the search stalled).  The
    accepted step never increases G.
    """
    grid = p.grid
    y_ie = _heat_forward(p, pi, f)
    G, _ = _div_cost(p, y_ie)
    gbar = _pressure_cost_gradient(p, y_ie)
    gn_sq = st_inner(gbar, gbar, grid)
    eta = eta_init
    while eta >= step_min:
        trial = remove_slice_means(pi - eta * gbar)
        G_trial, _ = _div_cost(p, _heat_forward(p, trial, f))
        if G_trial <= G - armijo_c * eta * gn_sq:
            return trial, {"G": G, "G_after": G_trial, "grad_norm": np.sqrt(gn_sq),
                           "step": eta}
        eta *= 0.5
    return pi, {"G": G, "G_after": G, "grad_norm": np.sqrt(gn_sq), "step": 0.0}


def pressure_stationary_point(p: ControlProblem, f, pi_init=None, max_steps=500,
                              tol_grad=1e-8):
    """Iterate pressure steps at frozen control until the cost gradient
    vanishes (the divergence cost is quadratic in the pressure, so the
    backtracked iteration converges to its unique mean-free minimizer)."""
    pi = remove_slice_means(pi_init) if pi_init is not None else p.grid.scalar_zeros()
    eta, g0 = 1.0, None
    info = None
    for _ in range(max_steps):
        pi_new, info = pressure_update_step(p, pi, f, eta_init=eta)
        if g0 is None:
            g0 = max(info["grad_norm"], 1e-300)
        if info["step"] == 0.0 or info["grad_norm"] <= tol_grad * g0:
            return pi_new, info
        eta = min(info["step"] * 2.0, 1e6)
        pi = pi_new
    return pi, info


def split_iteration(p: ControlProblem, cfg: SolveConfig):
    """Alternating scheme for null control.

    (a) least-squares descent in (y, f) at frozen pressure (the same
        machinery with the pressure direction and divergence penalty
        off), driving the heat-control residual down;
    (b) one backtracked gradient step on the pressure for the
        divergence cost of the frozen-control heat solution (exact
        implicit-Euler adjoint), which never increases that cost.

    The inner phase keeps the plain gradient update: its kernel is
    large and conjugate recombination drifts along it.
    """
    if p.mode != "null_control":
        raise ValueError("split iteration applies to null-control problems")
    grid = p.grid
    inner_cfg = SolveConfig(
        max_iter=cfg.inner_max_iter,
        tol_grad=cfg.inner_tol_grad,
        refresh_every=cfg.refresh_every,
        algorithm="steepest",
    )
    s = lift_sA(p)
    G_before, G_after, outer_gn, outer_steps, inner_reports = [], [], [], [], []
    div_inner = []
    converged, reason = False, "max_iter"
    eta = 1.0
    for it in range(cfg.max_iter + 1):
        s, rep = descend(p, inner_cfg, s_init=s, _div_weight=0.0,
                         _freeze_pressure=True)
        inner_reports.append(rep)
        dv = div(s.y, grid)
        div_inner.append(np.sqrt(st_inner(dv, dv, grid)))
        pi_new, info = pressure_update_step(p, s.pi, s.f, eta_init=min(eta * 2.0, 1e6))
        G_before.append(info["G"])
        G_after.append(info["G_after"])
        outer_gn.append(info["grad_norm"])
        if info["G"] <= cfg.tol_energy:
            converged, reason = True, "energy_tol"
            break
        if cfg.tol_grad and info["grad_norm"] <= cfg.tol_grad * max(outer_gn[0], 1e-300):
            converged, reason = True, "grad_tol"
            break
        if it == cfg.max_iter:
            break
        if info["step"] == 0.0:
            reason = "line_search_stall"
            break
        eta = info["step"]
        outer_steps.append(eta)
        s.pi = pi_new
    return s, SplitReport(
        outer_G=np.array(G_before),
        outer_G_after=np.array(G_after),
        outer_grad_norms=np.array(outer_gn),
        outer_steps=np.array(outer_steps),
        inner_reports=inner_reports,
        converged=converged,
        reason=reason,
        extras={"div_inner": np.array(div_inner)},
    )
