"""Numerical estimates of the consistency, limit-conformity and coercivity measures.

None of these are exact: S_D is bounded above through the weighted interpolant,
W_D is bounded below by a finite probe set, and C_D is bracketed through a
generalised eigenvalue problem (exact only for p = 2).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from hmmvi.gdm import (
    DiscreteVector,
    HmmDiscretisation,
    WeightFamily,
    face_averages,
    inscribed_ball_weights,
    interpolate_full,
)
from hmmvi.mesh import Tag

FIXED_TAGS = (Tag.GAMMA1, Tag.DIRICHLET)
DENSE_LIMIT = 1500
EIG_TOL = 1e-8
EIG_MAXITER = 5000


class InadmissibleTestFunction(ValueError):
    pass


class SolverDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class ConvexSet:
    """Upper bounds defining a discrete convex set.

    ``face_barrier`` maps face ids to upper bounds on v_sigma and
    ``cell_barrier`` gives upper bounds on every v_K (``inf`` for none).
    """

    face_ids: Optional[np.ndarray] = None
    face_barrier: Optional[np.ndarray] = None
    cell_barrier: Optional[np.ndarray] = None

    def violation(self, v: DiscreteVector) -> float:
        worst = 0.0
        if self.face_ids is not None and len(self.face_ids):
            worst = max(worst, float(np.max(v.face_values[self.face_ids] - self.face_barrier)))
        if self.cell_barrier is not None:
            worst = max(worst, float(np.max(v.cell_values - self.cell_barrier)))
        return worst


def free_dofs(disc: HmmDiscretisation, fixed_tags=FIXED_TAGS) -> np.ndarray:
    """Dof indices of X_{D,Gamma_{2,3}}: everything except faces with a fixed tag."""
    mesh = disc.mesh
    mask = np.ones(disc.n_dofs, dtype=bool)
    mask[mesh.n_cells + mesh.faces_with_tag(*fixed_tags)] = False
    return np.flatnonzero(mask)


@dataclass
class ConsistencyResult:
    value: float
    function_error: float
    gradient_error: float
    quadrature: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def diag_consistency(disc: HmmDiscretisation, phi: Callable, grad_phi: Callable,
                     convex_set: Optional[ConvexSet] = None, weights: Optional[WeightFamily] = None,
                     degree: int = 5, tol: float = 1e-12) -> ConsistencyResult:
    """Upper bound for S_D(phi) using v = P^omega_D phi.

    ``phi`` maps points (N, 2) to values (N,), ``grad_phi`` to gradients (N, 2).
    Errors are integrated with a degree-``degree`` rule on every diamond, so the
    result carries the quadrature error of that rule applied to smooth phi.
    """
    weights = inscribed_ball_weights(disc.mesh) if weights is None else weights
    v = interpolate_full(disc, phi, weights)
    if convex_set is not None and convex_set.violation(v) > tol:
        raise InadmissibleTestFunction(
            f"interpolant exceeds the barrier by {convex_set.violation(v):.3e}"
        )
    p = disc.p
    pts, w = disc.diamond_quadrature(degree)
    flat = pts.reshape(-1, 2)
    vals = np.asarray(phi(flat), dtype=float).reshape(w.shape)
    grads = np.asarray(grad_phi(flat), dtype=float).reshape(w.shape + (2,))
    cell = v.cell_values[disc.diamond_cell][:, None]
    f_err = float((w * np.abs(cell - vals) ** p).sum() ** (1 / p))
    gd = disc.gradient(v)[:, None, :]
    g_err = float((w * np.linalg.norm(gd - grads, axis=-1) ** p).sum() ** (1 / p))
    meta = {"diamond_rule_degree": degree, "face_rule_points": 3, "ball_rule": "gauss8 x trapezoid24"}
    return ConsistencyResult(f_err + g_err, f_err, g_err, meta)


def conformity_functional(disc: HmmDiscretisation, psi: Callable, div_psi: Callable,
                          boundary_tags=(Tag.GAMMA3,), degree: int = 5) -> np.ndarray:
    """Coefficients L with L . x = int (grad_D v . psi + Pi_D v div psi) - int_{Gamma3} psi.n T_D v."""
    mesh = disc.mesh
    pts, w = disc.diamond_quadrature(degree)
    flat = pts.reshape(-1, 2)
    ps = np.asarray(psi(flat), dtype=float).reshape(w.shape + (2,))
    dv = np.asarray(div_psi(flat), dtype=float).reshape(w.shape)
    psi_int = (w[..., None] * ps).sum(axis=1)  # (n_diamonds, 2)
    L = disc.gradient_matrix.T @ psi_int.ravel()
    L[: mesh.n_cells] += np.bincount(disc.diamond_cell, (w * dv).sum(axis=1), minlength=mesh.n_cells)
    faces = mesh.faces_with_tag(*boundary_tags)
    if len(faces):
        nrm = mesh.face_normals[faces]
        # psi . n averaged on each face, by 3-point Gauss
        comp = [face_averages(mesh, (lambda x, c=c: np.asarray(psi(x))[:, c]), faces) for c in range(2)]
        flux = comp[0] * nrm[:, 0] + comp[1] * nrm[:, 1]
        L[mesh.n_cells + faces] -= mesh.face_measures[faces] * flux
    return L


@dataclass
class ConformityResult:
    value: float
    optimal_probe_ratio: float
    best_random_ratio: float
    best_polynomial_ratio: float
    n_probes: int
    is_lower_bound: bool = True

    def as_dict(self) -> dict:
        return asdict(self)


def _gradient_form(disc: HmmDiscretisation, free: np.ndarray) -> sp.csr_matrix:
    return disc.stiffness()[free][:, free].tocsr()


def _solve_spsd(G: sp.csr_matrix, rhs: np.ndarray) -> np.ndarray:
    if G.shape[0] <= DENSE_LIMIT:
        return np.linalg.lstsq(G.toarray(), rhs, rcond=1e-12)[0]
    return spla.spsolve(G.tocsc(), rhs)


def diag_limit_conformity(disc: HmmDiscretisation, psi: Callable, div_psi: Callable, n_random: int = 32,
                          poly_degree: int = 3, seed: int = 0, degree: int = 5) -> ConformityResult:
    """Probe-based lower bound of W_D(psi).

    Probes: the maximiser of the p = 2 quotient (exact sup when p = 2), ``n_random``
    Gaussian vectors and pointwise interpolants of monomials up to ``poly_degree``,
    all restricted to X_{D,Gamma_{2,3}}. Probes with zero gradient norm are skipped.
    """
    p = disc.p
    mesh = disc.mesh
    free = free_dofs(disc)
    L = conformity_functional(disc, psi, div_psi, degree=degree)[free]

    def ratio(x_free):
        x = np.zeros(disc.n_dofs)
        x[free] = x_free
        den = disc.norm_gradient(x, p)
        if not den > 1e-300 * (1 + np.abs(x).max()):
            return None
        return abs(float(L @ x_free)) / den

    G = _gradient_form(disc, free)
    opt = _solve_spsd(G, L)
    r_opt = ratio(opt) or 0.0

    rng = np.random.default_rng(seed)
    r_rand = 0.0
    for _ in range(n_random):
        r = ratio(rng.standard_normal(len(free)))
        if r is not None:
            r_rand = max(r_rand, r)

    r_poly = 0.0
    pts = np.vstack([mesh.cell_centres, mesh.face_centres])
    for i in range(poly_degree + 1):
        for j in range(poly_degree + 1 - i):
            if i + j == 0:
                continue
            vals = pts[:, 0] ** i * pts[:, 1] ** j
            r = ratio(vals[free])
            if r is not None:
                r_poly = max(r_poly, r)
    n_poly = (poly_degree + 1) * (poly_degree + 2) // 2 - 1
    return ConformityResult(max(r_opt, r_rand, r_poly), r_opt, r_rand, r_poly, 1 + n_random + n_poly)


@dataclass
class CoercivityResult:
    """C_D bracket. ``value`` is the square root of the largest generalised eigenvalue
    of the (mass + trace) form against the gradient form. C_D itself, a sum of two
    ratios, lies in [lower, upper]."""

    value: float
    lower: float
    upper: float
    method: str
    exact: bool

    def as_dict(self) -> dict:
        return asdict(self)


def _mass_forms(disc: HmmDiscretisation, free: np.ndarray):
    mesh = disc.mesh
    cell = np.zeros(disc.n_dofs)
    cell[: mesh.n_cells] = mesh.cell_measures
    trace = np.zeros(disc.n_dofs)
    trace[mesh.n_cells + mesh.boundary_faces] = mesh.face_measures[mesh.boundary_faces]
    return cell[free], trace[free]


def _sum_ratio(disc: HmmDiscretisation, x: np.ndarray, p: float) -> float:
    v = DiscreteVector.from_array(disc.mesh, x)
    den = disc.norm_gradient(x, p)
    return (disc.norm_function(v, p) + disc.norm_trace(v, p)) / den


def diag_coercivity(disc: HmmDiscretisation, n_random: int = 64, seed: int = 0) -> CoercivityResult:
    """Estimate C_D over X_{D,Gamma_{2,3}}.

    For p = 2 the generalised eigenproblem is solved densely for small systems and
    with ARPACK (tolerance 1e-8, ``EIG_MAXITER`` iterations) otherwise. For other p
    the same eigenvector and random probes give a lower bound only.
    """
    mesh = disc.mesh
    free = free_dofs(disc)
    if len(mesh.faces_with_tag(*FIXED_TAGS)) == 0:
        raise ValueError("coercivity needs at least one face with fixed values")
    G = _gradient_form(disc, free)
    mc, mt = _mass_forms(disc, free)
    M = sp.diags(mc + mt).tocsr()
    n = len(free)
    if n <= DENSE_LIMIT:
        lam, vec = sla.eigh(M.toarray(), G.toarray(), subset_by_index=[n - 1, n - 1])
        lam, x = float(lam[0]), vec[:, 0]
        method = "dense generalised eigh"
    else:
        lu = spla.splu(G.tocsc())
        Minv = spla.LinearOperator(G.shape, matvec=lu.solve)
        try:
            lam, vec = spla.eigsh(M, k=1, M=G, Minv=Minv, which="LA", tol=EIG_TOL, maxiter=EIG_MAXITER)
        except spla.ArpackNoConvergence as exc:
            raise SolverDivergence(f"eigen-iteration did not converge in {EIG_MAXITER} steps") from exc
        lam, x = float(lam[0]), vec[:, 0]
        method = "ARPACK generalised Lanczos"
    c = math.sqrt(max(lam, 0.0))
    full = np.zeros(disc.n_dofs)
    full[free] = x
    if disc.p == 2.0:
        lower = _sum_ratio(disc, full, 2.0)
        return CoercivityResult(c, max(lower, c), math.sqrt(2.0) * c, method, True)
    rng = np.random.default_rng(seed)
    best = _sum_ratio(disc, full, disc.p)
    for _ in range(n_random):
        full[free] = rng.standard_normal(n)
        best = max(best, _sum_ratio(disc, full, disc.p))
    return CoercivityResult(best, best, math.inf, method + " + random probes", False)
