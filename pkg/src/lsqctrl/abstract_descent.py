"""Dense steepest-descent engine for quadratic error functionals.

Small-scale embodiment of the abstract convergence mechanism the PDE
solvers rely on: minimize E(u) = 1/2 ||T(u0 + u)||_Y^2 over a closed
subspace H of a finite-dimensional inner-product space X.  Everything
is dense, so the kernel A = Ker T \\cap H, its orthogonal projectors and
the exact minimizer are all computable and serve as oracles for the
matrix-free PDE machinery.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "InnerProductSpace",
    "LsqProblem",
    "DescentConfig",
    "DescentReport",
    "energy",
    "gradient",
    "kernel_projector",
    "oracle_minimizer",
    "descend",
    "random_instance",
]

_KERNEL_CUTOFF = 1e-10  # singular values below cutoff*sigma_max span Ker T


@dataclass(frozen=True)
class InnerProductSpace:
    """A finite-dimensional inner-product space given by its Gram matrix."""

    dim: int
    gram: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gram, dtype=float)
        if g.shape != (self.dim, self.dim):
            raise ValueError("gram matrix shape does not match dim")
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if np.abs(g - g.T).max() > 1e-12 * max(1.0, np.abs(g).max()):
            raise ValueError("gram matrix is not symmetric")
        try:
            np.linalg.cholesky(g)
        except np.linalg.LinAlgError as exc:
            raise ValueError("gram matrix is not positive definite") from exc
        object.__setattr__(self, "gram", g)

    @classmethod
    def euclidean(cls, dim):
        return cls(dim, np.eye(dim))

    def inner(self, u, v):
        return float(np.asarray(u) @ self.gram @ np.asarray(v))

    def norm(self, u):
        return float(np.sqrt(max(self.inner(u, u), 0.0)))


@dataclass
class LsqProblem:
    """E(u) = 1/2 ||T(u0 + u)||_Y^2 minimized over u in span(H_basis)."""

    X: InnerProductSpace
    Y: InnerProductSpace
    T_map: np.ndarray
    H_basis: np.ndarray
    u0: np.ndarray

    # derived dense factors, built once in __post_init__
    _TH: np.ndarray = field(init=False, repr=False)
    _gram_H: np.ndarray = field(init=False, repr=False)
    _Tu0: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.T_map = np.asarray(self.T_map, dtype=float)
        self.H_basis = np.asarray(self.H_basis, dtype=float)
        self.u0 = np.asarray(self.u0, dtype=float)
        if self.T_map.shape != (self.Y.dim, self.X.dim):
            raise ValueError("T_map must be Y.dim x X.dim")
        if self.H_basis.ndim != 2 or self.H_basis.shape[0] != self.X.dim:
            raise ValueError("H_basis must have X.dim rows")
        if self.u0.shape != (self.X.dim,):
            raise ValueError("u0 must be a vector in X")
        if np.linalg.matrix_rank(self.H_basis) < self.H_basis.shape[1]:
            raise ValueError("H_basis is rank deficient")
        self._TH = self.T_map @ self.H_basis
        self._gram_H = self.H_basis.T @ self.X.gram @ self.H_basis
        self._Tu0 = self.T_map @ self.u0

    @property
    def dim_H(self):
        return self.H_basis.shape[1]

    def _check_u(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape != (self.dim_H,):
            raise ValueError(f"expected H-coordinates of length {self.dim_H}, got {u.shape}")
        return u

    def image(self, u):
        """T(u0 + u) for u in H coordinates."""
        return self._Tu0 + self._TH @ self._check_u(u)

    def inner_H(self, a, b):
        return float(np.asarray(a) @ self._gram_H @ np.asarray(b))

    def norm_H(self, a):
        return float(np.sqrt(max(self.inner_H(a, a), 0.0)))


@dataclass
class DescentConfig:
    max_iter: int = 500
    tol_energy: float = 0.0
    tol_grad: float = 0.0
    step_rule: str = "exact"  # "exact" or "fixed"
    fixed_step: float = 1.0
    record_trace: bool = True

    def __post_init__(self):
        if self.max_iter <= 0:
            raise ValueError("max_iter must be positive")
        if self.tol_energy < 0 or self.tol_grad < 0:
            raise ValueError("tolerances must be nonnegative")
        if self.step_rule not in ("exact", "fixed"):
            raise ValueError("step_rule must be 'exact' or 'fixed'")
        if self.step_rule == "fixed" and self.fixed_step <= 0:
            raise ValueError("fixed step must be positive")


@dataclass
class DescentReport:
    iterates_count: int
    energies: np.ndarray
    grad_norms: np.ndarray
    final_u: np.ndarray
    converged: bool
    reason: str  # energy_tol | grad_tol | max_iter | kernel_stall
    steps: np.ndarray = None
    kernel_ratios: np.ndarray = None
    extras: dict = field(default_factory=dict)


def random_instance(seed, dim_x=None, dim_y=None, rank_deficient=False):
    """Seeded dense instance whose restriction T|H has a tame spectrum.

    Singular values of T on span(H_basis) are kept inside [0.7, 2]
    (plus exact zeros when rank_deficient), so exact-line-search descent
    resolves the minimizer to far below 1e-8 within a few hundred
    steps; wilder spectra exercise only the slow-convergence caveat the
    method makes no promise about.
    """
    rng = np.random.default_rng(seed)
    nx = dim_x or int(rng.integers(3, 13))
    ny = dim_y or int(rng.integers(3, 13))

    def spd(n, cond=2.0):
        Q = np.linalg.qr(rng.standard_normal((n, n)))[0]
        return Q @ np.diag(np.linspace(1.0, cond, n)) @ Q.T

    X = InnerProductSpace(nx, spd(nx))
    Y = InnerProductSpace(ny, spd(ny))
    kh = int(rng.integers(2, min(nx, ny) + 1))
    B = np.linalg.qr(rng.standard_normal((nx, nx)))[0]
    H = B[:, :kh]
    sig = np.geomspace(0.7, 2.0, kh)
    if rank_deficient:
        sig[max(1, kh - 2):] = 0.0
    Uy = np.linalg.qr(rng.standard_normal((ny, ny)))[0]
    C = np.zeros((ny, nx))
    C[:, :kh] = Uy[:, :kh] @ np.diag(sig)
    if nx > kh:
        C[:, kh:] = rng.standard_normal((ny, nx - kh)) / np.sqrt(nx - kh)
    return LsqProblem(X, Y, C @ B.T, H, rng.standard_normal(nx))


def energy(p: LsqProblem, u):
    """E(u) = 1/2 <T(u0+u), T(u0+u)>_Y."""
    r = p.image(u)
    return 0.5 * p.Y.inner(r, r)


def gradient(p: LsqProblem, u):
    """Riesz representative of E' in the H-restricted inner product.

    Orthogonal (in H) to Ker T by construction: <g, a>_H = <T a, .>_Y = 0
    for every a with T a = 0.
    """
    rhs = p._TH.T @ (p.Y.gram @ p.image(u))
    try:
        return np.linalg.solve(p._gram_H, rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError("H-restricted Gram matrix is singular") from exc


def _gram_sqrt(gram):
    w, V = np.linalg.eigh(gram)
    w = np.clip(w, 0.0, None)
    return V @ np.diag(np.sqrt(w)) @ V.T, V @ np.diag(1.0 / np.sqrt(w)) @ V.T


def kernel_projector(p: LsqProblem):
    """H-orthogonal projectors (P_A, P_perp) onto A = Ker T cap H and A-perp.

    Dense SVD with relative cutoff defines the numerical kernel.
    Requires X.dim <= 2000 so the factorizations stay cheap.
    """
    if p.X.dim > 2000:
        raise ValueError("dense kernel projector limited to X.dim <= 2000")
    gy_sqrt, _ = _gram_sqrt(p.Y.gram)
    gh_sqrt, gh_isqrt = _gram_sqrt(p._gram_H)
    # singular structure of T restricted to H, in H-orthonormal coordinates
    M = gy_sqrt @ p._TH @ gh_isqrt
    _, svals, Vt = np.linalg.svd(M)
    smax = svals[0] if svals.size else 0.0
    ker_mask = np.ones(p.dim_H, dtype=bool)
    ker_mask[: svals.size] = svals <= _KERNEL_CUTOFF * max(smax, 1.0e-300)
    N = Vt.T[:, ker_mask]  # orthonormal kernel basis in transformed coords
    P_A = gh_isqrt @ (N @ N.T) @ gh_sqrt
    return P_A, np.eye(p.dim_H) - P_A


def oracle_minimizer(p: LsqProblem):
    """Minimizer of E over u0 + A-perp via pseudoinverse (dense oracle)."""
    gy_sqrt, _ = _gram_sqrt(p.Y.gram)
    gh_sqrt, gh_isqrt = _gram_sqrt(p._gram_H)
    M = gy_sqrt @ p._TH @ gh_isqrt
    rhs = gy_sqrt @ p._Tu0
    d = -np.linalg.pinv(M, rcond=_KERNEL_CUTOFF) @ rhs
    return gh_isqrt @ d


def descend(p: LsqProblem, u_init, cfg: DescentConfig):
    """Steepest descent u_{k+1} = u_k - eta_k g_k with exact or fixed step.

    With the exact step the energy is non-increasing to roundoff and, if
    u_init lies in A-perp, so does every iterate.
    """
    u = p._check_u(u_init).copy()
    energies, gnorms, steps, ratios = [], [], [], []
    converged = False
    reason = "max_iter"
    for _ in range(cfg.max_iter + 1):
        e = energy(p, u)
        g = gradient(p, u)
        gn = p.norm_H(g)
        energies.append(e)
        gnorms.append(gn)
        if e <= cfg.tol_energy:
            converged, reason = True, "energy_tol"
            break
        if gn <= cfg.tol_grad:
            converged, reason = True, "grad_tol"
            break
        if len(energies) > cfg.max_iter:
            break
        Tg = p._TH @ g
        tg2 = p.Y.inner(Tg, Tg)
        ratios.append(np.sqrt(max(tg2, 0.0)) / gn if gn > 0 else 0.0)
        if tg2 <= (1e-14 * gn) ** 2:
            # direction numerically inside Ker T: no energy to extract
            reason = "kernel_stall"
            break
        if cfg.step_rule == "exact":
            eta = p.Y.inner(p.image(u), Tg) / tg2
        else:
            eta = cfg.fixed_step
        u -= eta * g
        steps.append(eta)
    return DescentReport(
        iterates_count=len(energies),
        energies=np.array(energies),
        grad_norms=np.array(gnorms),
        final_u=u,
        converged=converged,
        reason=reason,
        steps=np.array(steps),
        kernel_ratios=np.array(ratios),
    )
