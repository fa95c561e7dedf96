"""Discrete variational-inequality solvers.

* ``solve_linear_vi``: Signorini problem with a frozen coefficient, solved by the
  monotone active-set iteration over the constrained faces.
* ``solve_kacanov``: fixed-point loop freezing the coefficient at the previous
  iterate, with optional under-relaxation when iterates start to oscillate.
* ``solve_obstacle``: the same loop with a primal-dual active set over cells.
* ``solve_newton_vi`` / ``solve_bulkley``: damped Newton for fluxes that are not
  quasi-linear, and for the regularised yield-stress model.

Sign convention: F_{K,sigma}(u) is the flux leaving K through sigma, defined by
sum_sigma |sigma| F_{K,sigma}(u) (v_K - v_sigma) = a_K(u, v).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from hmmvi.gdm import DiscreteVector, HmmDiscretisation, face_averages
from hmmvi.mesh import Tag
from hmmvi.operators import OperatorSpec

log = logging.getLogger(__name__)

SIGNORINI, OBSTACLE, BULKLEY = "signorini", "obstacle", "bulkley"
MODELS = (SIGNORINI, OBSTACLE, BULKLEY)


class SolverError(RuntimeError):
    pass


class IterationCapExceeded(SolverError):
    pass


class LinearSolveFailure(SolverError):
    pass


class MaxOuterExceeded(SolverError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NewtonDivergence(SolverError):
    pass


class InfeasibleConstraintSet(ValueError):
    pass


# ---- problem description -------------------------------------------------------


def cell_averages(disc: HmmDiscretisation, f, degree: int = 5) -> np.ndarray:
    """Cell averages of ``f``: a constant, an array of cell values or a callable of points."""
    mesh = disc.mesh
    if f is None:
        return np.zeros(mesh.n_cells)
    if callable(f):
        pts, w = disc.diamond_quadrature(degree)
        vals = np.asarray(f(pts.reshape(-1, 2)), dtype=float).reshape(w.shape)
        per_diamond = (vals * w).sum(axis=1)
        return np.bincount(disc.diamond_cell, per_diamond, minlength=mesh.n_cells) / mesh.cell_measures
    arr = np.asarray(f, dtype=float)
    if arr.ndim == 0:
        return np.full(mesh.n_cells, float(arr))
    if arr.shape != (mesh.n_cells,):
        raise ValueError("source array must have one value per cell")
    return arr.copy()


@dataclass
class VIProblem:
    """A discrete variational inequality.

    ``dirichlet`` is imposed on Gamma_1 faces for the Signorini model and on
    Dirichlet-tagged faces otherwise. ``barrier`` is an upper bound on Gamma_3
    face values (Signorini; default: face-centre ordinate) or on cell values
    (obstacle; ``inf`` entries mean unconstrained). Each may be a constant, an
    array or a callable of points.
    """

    disc: HmmDiscretisation
    operator: OperatorSpec
    model: str = SIGNORINI
    source: Union[float, np.ndarray, Callable, None] = 0.0
    dirichlet: Union[float, np.ndarray, Callable, None] = 0.0
    barrier: Union[float, np.ndarray, Callable, None] = None
    yield_coefficient: float = 1.0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODELS}")
        mesh = self.disc.mesh
        self.cell_source = cell_averages(self.disc, self.source)
        if self.model == SIGNORINI:
            self.fixed_faces = mesh.faces_with_tag(Tag.GAMMA1)
            self.constrained_faces = mesh.faces_with_tag(Tag.GAMMA3)
            self.natural_faces = mesh.faces_with_tag(Tag.GAMMA2)
        else:
            self.fixed_faces = mesh.faces_with_tag(Tag.DIRICHLET, Tag.GAMMA1)
            self.constrained_faces = np.zeros(0, dtype=np.int64)
            self.natural_faces = mesh.faces_with_tag(Tag.GAMMA2, Tag.GAMMA3)
        self.fixed_values = self._face_data(self.dirichlet, self.fixed_faces)
        if self.model == BULKLEY:
            if np.any(self.fixed_values != 0.0):
                raise ValueError("the yield-stress model takes homogeneous Dirichlet data")
            if len(self.natural_faces):
                raise ValueError("the yield-stress model needs every boundary face tagged Dirichlet")
            if self.yield_coefficient < 0:
                raise ValueError("yield coefficient must be non-negative")
        if self.model == SIGNORINI:
            if self.barrier is None:
                self.face_barrier = mesh.face_centres[self.constrained_faces, 1].copy()
            else:
                self.face_barrier = self._face_data(self.barrier, self.constrained_faces)
            self.cell_barrier = None
        elif self.model == OBSTACLE:
            self.face_barrier = np.zeros(0)
            b = math.inf if self.barrier is None else self.barrier
            if callable(b):
                self.cell_barrier = np.asarray(b(mesh.cell_centres), dtype=float)
            else:
                self.cell_barrier = np.broadcast_to(np.asarray(b, dtype=float), (mesh.n_cells,)).copy()
        else:
            self.face_barrier = np.zeros(0)
            self.cell_barrier = None
        self.check_feasible()

    def _face_data(self, data, faces) -> np.ndarray:
        if data is None:
            return np.zeros(len(faces))
        if callable(data):
            return face_averages(self.disc.mesh, data, faces)
        arr = np.asarray(data, dtype=float)
        if arr.ndim == 0:
            return np.full(len(faces), float(arr))
        if arr.shape != (len(faces),):
            raise ValueError(f"expected {len(faces)} face values, got shape {arr.shape}")
        return arr.copy()

    def check_feasible(self, tol: float = 1e-12) -> None:
        """Reject barriers that make the discrete convex set empty.

        Barriers must not be NaN or -inf, and an obstacle must not lie below the
        Dirichlet value on a boundary face of its own cell.
        """
        mesh = self.disc.mesh
        if self.model == SIGNORINI:
            if np.any(np.isnan(self.face_barrier)) or np.any(self.face_barrier == -np.inf):
                raise InfeasibleConstraintSet("face barrier contains NaN or -inf")
        elif self.model == OBSTACLE:
            if np.any(np.isnan(self.cell_barrier)) or np.any(self.cell_barrier == -np.inf):
                raise InfeasibleConstraintSet("obstacle contains NaN or -inf")
            cells = mesh.face_cells[self.fixed_faces, 0]
            gap = self.fixed_values - self.cell_barrier[cells]
            if len(gap) and gap.max() > tol * (1 + np.abs(self.fixed_values).max()):
                k = int(np.argmax(gap))
                raise InfeasibleConstraintSet(
                    f"obstacle {self.cell_barrier[cells[k]]:g} in cell {cells[k]} lies below "
                    f"the boundary value {self.fixed_values[k]:g} on face {self.fixed_faces[k]}"
                )

    @property
    def mesh(self):
        return self.disc.mesh

    def face_scale(self) -> float:
        vals = np.concatenate([self.fixed_values, self.face_barrier[np.isfinite(self.face_barrier)], [0.0]])
        return 1.0 + float(np.abs(vals).max())


@dataclass
class ActiveSetState:
    """Partition of the constrained entities into active (at the barrier) and inactive.

    ``ids`` are face ids (Signorini) or cell ids (obstacle); ``active`` is a mask over them.
    """

    ids: np.ndarray
    active: np.ndarray
    iterations: int = 0

    @classmethod
    def all_active(cls, ids) -> "ActiveSetState":
        ids = np.asarray(ids, dtype=np.int64)
        return cls(ids, np.ones(len(ids), dtype=bool))

    @classmethod
    def all_inactive(cls, ids) -> "ActiveSetState":
        ids = np.asarray(ids, dtype=np.int64)
        return cls(ids, np.zeros(len(ids), dtype=bool))

    @property
    def cap(self) -> int:
        return len(self.ids)

    @property
    def A(self) -> np.ndarray:
        return self.ids[self.active]

    @property
    def B(self) -> np.ndarray:
        return self.ids[~self.active]

    def copy(self) -> "ActiveSetState":
        return ActiveSetState(self.ids.copy(), self.active.copy(), self.iterations)


@dataclass
class SolverOptions:
    delta: float = 1e-2
    max_outer: int = 50
    relaxation: bool = True
    relax_trigger: float = 1e-2
    relax_factor: float = 0.5
    warm_start: bool = True
    linear_rtol: float = 1e-10
    set_tol: float = 1e-10
    newton_tol: float = 1e-10
    newton_max_iter: int = 100
    eta0: float = 1e-2
    eta_steps: int = 4

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not 0 < self.relax_factor <= 1:
            raise ValueError("relaxation factor must lie in (0, 1]")
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")


@dataclass
class SolveReport:
    solution: DiscreteVector
    model: str
    algorithm: str
    outer_iterations: int = 0
    inner_iterations: list = field(default_factory=list)
    residual_history: list = field(default_factory=list)
    relaxation_events: list = field(default_factory=list)
    wall_time: float = 0.0
    converged: bool = True
    state: Optional[ActiveSetState] = None
    kkt: dict = field(default_factory=dict)
    notes: str = ""
    linear_solution: Optional[DiscreteVector] = None

    def summary(self) -> dict:
        out = {
            "model": self.model,
            "algorithm": self.algorithm,
            "outer_iterations": self.outer_iterations,
            "inner_iterations": list(map(int, self.inner_iterations)),
            "residual_history": [float(r) for r in self.residual_history],
            "relaxation_events": self.relaxation_events,
            "wall_time": self.wall_time,
            "converged": self.converged,
            "kkt": {k: float(v) for k, v in self.kkt.items()},
        }
        if self.notes:
            out["notes"] = self.notes
        if self.state is not None:
            out["active_set"] = [int(i) for i in self.state.A]
        return out


# ---- fluxes and linear algebra ------------------------------------------------------


@dataclass
class FluxAssembly:
    """Local flux matrices of a quasi-linear operator frozen at some iterate.

    ``local[g]`` has shape (m, 1+n, 1+n) for the cells of ``disc.groups[g]``;
    row i > 0 times -1/|sigma_i| gives F_{K,sigma_i}.
    """

    disc: HmmDiscretisation
    local: list
    weights: np.ndarray
    _matrix: Optional[sp.csr_matrix] = None

    @property
    def matrix(self) -> sp.csr_matrix:
        if self._matrix is None:
            self._matrix = self.disc.assemble(self.local)
        return self._matrix

    def fluxes(self, u) -> np.ndarray:
        return self.disc.fluxes(u, self.local)

    def cell_flux_map(self, K: int):
        """(local dofs, matrix M) with F_{K,.}(u) = M @ u[dofs]."""
        for g, S in zip(self.disc.groups, self.local):
            hit = np.flatnonzero(g.cells == K)
            if len(hit):
                i = hit[0]
                return g.dofs[i], -S[i, 1:, :] / g.sigma[i][:, None]
        raise IndexError(K)

    def bilinear(self, u, v) -> float:
        x = u.array if isinstance(u, DiscreteVector) else u
        y = v.array if isinstance(v, DiscreteVector) else v
        return float(y @ (self.matrix @ x))


def assemble_fluxes(disc: HmmDiscretisation, operator: OperatorSpec, w=None) -> FluxAssembly:
    """Flux maps of the operator with its coefficient frozen at the cell values of ``w``."""
    if not operator.is_quasilinear:
        raise ValueError(f"operator {operator.name!r} is not quasi-linear")
    w = DiscreteVector.zeros(disc.mesh) if w is None else w
    weights = operator.diamond_weights(disc, w)
    return FluxAssembly(disc, disc.local_matrices(weights, operator.tensor), weights)


def condensed_solve(S: sp.spmatrix, b: np.ndarray, fixed: np.ndarray, fixed_values: np.ndarray,
                    n_cells: int, rtol: float = 1e-10) -> np.ndarray:
    """Solve S x = b on the free dofs with x[fixed] = fixed_values.

    Free cell unknowns only couple to themselves and their faces, so they are
    eliminated first and a face-only system is factorised.
    """
    S = S.tocsr()
    n = S.shape[0]
    x = np.zeros(n)
    x[fixed] = fixed_values
    free = np.ones(n, dtype=bool)
    free[fixed] = False
    rhs = b - S @ x
    fc = np.flatnonzero(free[:n_cells])
    ff = n_cells + np.flatnonzero(free[n_cells:])
    D = S.diagonal()[fc]
    if np.any(D <= 0):
        raise LinearSolveFailure("non-positive cell diagonal in the flux system")
    Scf = S[fc][:, ff]
    if len(ff):
        Sff = S[ff][:, ff]
        schur = (Sff - Scf.T @ sp.diags(1.0 / D) @ Scf).tocsc()
        rf = rhs[ff] - Scf.T @ (rhs[fc] / D)
        try:
            xf = spla.splu(schur).solve(rf)
        except RuntimeError as exc:
            raise LinearSolveFailure(f"face system is singular: {exc}") from exc
        x[ff] = xf
        x[fc] = (rhs[fc] - Scf @ xf) / D
    else:
        x[fc] = rhs[fc] / D
    idx = np.flatnonzero(free)
    res = (S @ x - b)[idx]
    scale = np.abs(b[idx]).max(initial=0.0) + abs(S).max() * np.abs(x).max(initial=0.0)
    if not np.all(np.isfinite(x)) or np.abs(res).max(initial=0.0) > rtol * max(scale, 1e-300):
        raise LinearSolveFailure(
            f"linear residual {np.abs(res).max(initial=0.0):.3e} exceeds {rtol:g} relative"
        )
    return x


def _rhs(problem: VIProblem) -> np.ndarray:
    b = np.zeros(problem.disc.n_dofs)
    b[: problem.mesh.n_cells] = problem.mesh.cell_measures * problem.cell_source
    return b


def _flux_scale(problem: VIProblem, F: np.ndarray, S=None, x=None) -> float:
    """Size of the fluxes, floored by the source and by the roundoff level of S x."""
    src = float(np.abs(problem.mesh.cell_measures * problem.cell_source).sum())
    noise = 0.0
    if S is not None and x is not None:
        noise = float(abs(S).max() * np.abs(x).max(initial=0.0) / problem.mesh.face_measures.min())
    return max(float(np.abs(F).max(initial=0.0)), src, noise, 1e-300)


# ---- Signorini: monotone active-set iteration -------------------------------------


def _signorini_solve_sets(problem: VIProblem, S, active: np.ndarray, rtol: float) -> np.ndarray:
    nc = problem.mesh.n_cells
    faces = problem.constrained_faces
    fixed = np.concatenate([nc + problem.fixed_faces, nc + faces[active]])
    vals = np.concatenate([problem.fixed_values, problem.face_barrier[active]])
    return condensed_solve(S, _rhs(problem), fixed, vals, nc, rtol)


def solve_linear_vi(problem: VIProblem, w: Optional[DiscreteVector] = None,
                    state: Optional[ActiveSetState] = None, options: Optional[SolverOptions] = None,
                    fluxes: Optional[FluxAssembly] = None):
    """Solve the Signorini problem with the coefficient frozen at ``w``.

    Starting from ``state`` (all constrained faces active by default), alternately
    solves the mixed linear system and moves faces: an active face with strictly
    negative outflow becomes inactive, an inactive face whose value exceeds the
    barrier becomes active. A change is only made when the violation exceeds a
    relative tolerance ``options.set_tol``, so ties stay put. Returns the solution
    and the converged state; ``state.iterations`` is the number of linear solves.
    """
    if problem.model != SIGNORINI:
        raise ValueError("solve_linear_vi handles the Signorini model")
    options = options or SolverOptions()
    mesh = problem.mesh
    fluxes = fluxes or assemble_fluxes(problem.disc, problem.operator, w)
    S = fluxes.matrix
    faces = problem.constrained_faces
    state = ActiveSetState.all_active(faces) if state is None else state.copy()
    if not np.array_equal(state.ids, faces):
        raise ValueError("active-set state does not match the constrained faces")
    bd = problem.disc.boundary_diamond()[faces]
    u_tol = options.set_tol * problem.face_scale()
    solves = 0
    while True:
        x = _signorini_solve_sets(problem, S, state.active, options.linear_rtol)
        solves += 1
        if len(faces) == 0:
            break
        F = fluxes.fluxes(x)
        f_tol = options.set_tol * _flux_scale(problem, F, S, x)
        out = F[bd]
        vals = x[mesh.n_cells + faces]
        keep = state.active & (out >= -f_tol)
        enter = ~state.active & (vals - problem.face_barrier > u_tol)
        new = keep | enter
        if np.array_equal(new, state.active):
            break
        if solves > state.cap:
            raise IterationCapExceeded(
                f"active-set iteration exceeded {state.cap} updates; degenerate or inconsistent data"
            )
        state.active = new
    state.iterations = solves
    return DiscreteVector.from_array(mesh, x), state


def signorini_kkt(problem: VIProblem, u: DiscreteVector, fluxes: FluxAssembly) -> dict:
    """Scaled complementarity and balance residuals of a Signorini solution.

    ``complementarity_min`` is min over Gamma_3 of min(barrier - u, F) (should be
    >= 0); ``complementarity_product`` is max |F (u - barrier)|; both scaled.
    """
    mesh = problem.mesh
    x = u.array
    F = fluxes.fluxes(x)
    fs = _flux_scale(problem, F, fluxes.matrix, x)
    us = problem.face_scale()
    faces = problem.constrained_faces
    bd = problem.disc.boundary_diamond()
    out = {}
    if len(faces):
        gap = (problem.face_barrier - x[mesh.n_cells + faces]) / us
        fl = F[bd[faces]] / fs
        out["complementarity_min"] = float(np.minimum(gap, fl).min())
        out["complementarity_product"] = float(np.abs(gap * fl).max())
    else:
        out["complementarity_min"] = 0.0
        out["complementarity_product"] = 0.0
    out.update(_balance(problem, fluxes, x, F, fs))
    return out


def _balance(problem: VIProblem, fluxes: FluxAssembly, x, F, fs) -> dict:
    mesh = problem.mesh
    Sx = fluxes.matrix @ x
    b = _rhs(problem)
    cell = np.abs(Sx[: mesh.n_cells] - b[: mesh.n_cells]).max() / fs
    interior = mesh.interior_faces
    cont = np.abs(Sx[mesh.n_cells + interior]).max(initial=0.0) / fs
    bd = problem.disc.boundary_diamond()
    nat = np.abs(F[bd[problem.natural_faces]]).max(initial=0.0) / fs
    bfaces = mesh.boundary_faces
    total = abs(b[: mesh.n_cells].sum() - (mesh.face_measures[bfaces] * F[bd[bfaces]]).sum()) / fs
    return {"cell_balance": float(cell), "flux_continuity": float(cont), "natural_flux": float(nat),
            "global_balance": float(total)}


# ---- obstacle: primal-dual active set over cells ------------------------------------


def solve_cell_obstacle(problem: VIProblem, fluxes: FluxAssembly, state: Optional[ActiveSetState] = None,
                        options: Optional[SolverOptions] = None):
    """Linear obstacle problem u_K <= psi_K with multiplier |K| f_K - (S u)_K >= 0."""
    options = options or SolverOptions()
    mesh = problem.mesh
    nc = mesh.n_cells
    S = fluxes.matrix
    b = _rhs(problem)
    cells = np.flatnonzero(np.isfinite(problem.cell_barrier))
    state = ActiveSetState.all_inactive(cells) if state is None else state.copy()
    psi = problem.cell_barrier[cells]
    u_tol = options.set_tol * (problem.face_scale() + np.abs(psi).max(initial=0.0))
    solves = 0
    while True:
        fixed = np.concatenate([nc + problem.fixed_faces, state.A])
        vals = np.concatenate([problem.fixed_values, psi[state.active]])
        x = condensed_solve(S, b, fixed, vals, nc, options.linear_rtol)
        solves += 1
        if len(cells) == 0:
            break
        mult = b[cells] - (S @ x)[cells]
        m_tol = options.set_tol * (np.abs(b).sum() + np.abs(mult).max(initial=0.0) + 1e-300)
        keep = state.active & (mult >= -m_tol)
        enter = ~state.active & (x[cells] - psi > u_tol)
        new = keep | enter
        if np.array_equal(new, state.active):
            break
        if solves > state.cap + 1:
            raise IterationCapExceeded(f"cell active-set iteration exceeded {state.cap + 1} solves")
        state.active = new
    state.iterations = solves
    return DiscreteVector.from_array(mesh, x), state


def obstacle_kkt(problem: VIProblem, u: DiscreteVector, fluxes: FluxAssembly) -> dict:
    mesh = problem.mesh
    x = u.array
    b = _rhs(problem)
    F = fluxes.fluxes(x)
    fs = _flux_scale(problem, F)
    Sx = fluxes.matrix @ x
    cells = np.flatnonzero(np.isfinite(problem.cell_barrier))
    us = problem.face_scale() + np.abs(problem.cell_barrier[cells]).max(initial=0.0)
    mult = (b - Sx)[cells] / fs
    gap = (problem.cell_barrier[cells] - x[cells]) / us
    out = {
        "obstacle_gap_min": float(gap.min(initial=0.0)),
        "multiplier_min": float(mult.min(initial=0.0)),
        "complementarity_product": float(np.abs(mult * gap).max(initial=0.0)),
    }
    free = np.ones(mesh.n_cells, dtype=bool)
    free[cells[gap * us <= 1e-12 * us]] = False
    out["cell_balance"] = float(np.abs((Sx - b)[:mesh.n_cells][free]).max(initial=0.0) / fs)
    out["flux_continuity"] = float(np.abs(Sx[mesh.n_cells + mesh.interior_faces]).max(initial=0.0) / fs)
    return out


# ---- fixed-point loop ---------------------------------------------------------------


def _stop_measure(disc: HmmDiscretisation, x):
    v = DiscreteVector.from_array(disc.mesh, x)
    return disc.norm_function(v, 2.0) + disc.norm_gradient(x, 2.0)


def _initial_state(problem: VIProblem) -> ActiveSetState:
    if problem.model == SIGNORINI:
        return ActiveSetState.all_active(problem.constrained_faces)
    if problem.cell_barrier is None:
        return ActiveSetState.all_inactive(np.zeros(0, dtype=np.int64))
    return ActiveSetState.all_inactive(np.flatnonzero(np.isfinite(problem.cell_barrier)))


def solve_kacanov(problem: VIProblem, options: Optional[SolverOptions] = None) -> SolveReport:
    """Fixed-point iteration on the coefficient, each step a linear VI.

    u^0 = 0. Each step solves the linear VI with the coefficient frozen at u^n,
    giving u~. If |u^n - u^{n-2}|_inf <= relax_trigger |u^{n-2}|_inf, the update is
    damped to u^n + relax_factor (u~ - u^n). Stops once
    ||Pi(u^{n+1}-u^n)|| + ||grad(u^{n+1}-u^n)|| <= delta (||Pi u^n|| + ||grad u^n||) in L^2.
    ``outer_iterations`` counts linear VI solves.
    """
    options = options or SolverOptions()
    if not problem.operator.is_quasilinear:
        raise ValueError("the fixed-point loop needs a quasi-linear operator; use solve_newton_vi")
    if problem.model not in (SIGNORINI, OBSTACLE):
        raise ValueError("the fixed-point loop handles the Signorini and obstacle models")
    t0 = time.perf_counter()
    disc = problem.disc
    x = np.zeros(disc.n_dofs)
    history = [x]
    state = _initial_state(problem)
    report = SolveReport(DiscreteVector.from_array(disc.mesh, x), problem.model,
                         "fixed point + monotone active set" if problem.model == SIGNORINI
                         else "fixed point + cell active set")
    for n in range(options.max_outer):
        w = DiscreteVector.from_array(disc.mesh, x)
        fluxes = assemble_fluxes(disc, problem.operator, w)
        start = state if options.warm_start else _initial_state(problem)
        if problem.model == SIGNORINI:
            u_lin, state = solve_linear_vi(problem, None, start, options, fluxes)
        else:
            u_lin, state = solve_cell_obstacle(problem, fluxes, start, options)
        report.inner_iterations.append(state.iterations)
        y = u_lin.array
        if options.relaxation and len(history) >= 3:
            prev2 = history[-3]
            ref = np.abs(prev2).max()
            if np.abs(x - prev2).max() <= options.relax_trigger * ref:
                y = x + options.relax_factor * (y - x)
                report.relaxation_events.append({"outer": n + 1, "ratio": float(np.abs(x - prev2).max() / ref)})
        lhs = _stop_measure(disc, y - x)
        rhs = _stop_measure(disc, x)
        report.residual_history.append(lhs / rhs if rhs > 0 else math.inf)
        report.outer_iterations = n + 1
        x = y
        history.append(x)
        if lhs <= options.delta * rhs:
            break
    else:
        report.converged = False
    report.solution = DiscreteVector.from_array(disc.mesh, x)
    report.state = state
    if problem.model == SIGNORINI:
        report.kkt = signorini_kkt(problem, u_lin, fluxes)
    else:
        report.kkt = obstacle_kkt(problem, u_lin, fluxes)
    report.linear_solution = u_lin
    report.wall_time = time.perf_counter() - t0
    if not report.converged:
        raise MaxOuterExceeded(f"no convergence after {options.max_outer} outer iterations", report)
    log.info("fixed point converged in %d outer iterations", report.outer_iterations)
    return report


def solve_obstacle(problem: VIProblem, options: Optional[SolverOptions] = None) -> SolveReport:
    """Obstacle problem: fixed-point loop for quasi-linear operators, Newton otherwise."""
    if problem.model != OBSTACLE:
        raise ValueError("solve_obstacle expects an obstacle problem")
    if problem.operator.is_quasilinear:
        return solve_kacanov(problem, options)
    return solve_newton_vi(problem, options)


# ---- Newton path for general fluxes ----------------------------------------------


class NonlinearForm:
    """Residual, Jacobian and (when available) energy of
    sum_D int_D a(x, u_K, grad_D u) . grad_D v + yield int |grad_D v|_eta - int f Pi v.
    """

    def __init__(self, problem: VIProblem, yield_coefficient: float = 0.0, eta: float = 0.0, degree: int = 5):
        self.problem = problem
        disc = problem.disc
        self.disc = disc
        self.op = problem.operator
        self.yield_coefficient = float(yield_coefficient)
        self.eta = float(eta)
        pts, w = disc.diamond_quadrature(degree)
        self.q = w.shape[1]
        self.points = pts.reshape(-1, 2)
        self.weights = w
        self.b = _rhs(problem)
        self.G = disc.gradient_matrix
        self.P = sp.csr_matrix(
            (np.ones(disc.n_diamonds), (np.arange(disc.n_diamonds), disc.diamond_cell)),
            shape=(disc.n_diamonds, disc.n_dofs),
        )

    def _state(self, x):
        g = (self.G @ x).reshape(-1, 2)
        s = x[self.disc.diamond_cell]
        return g, s

    def _yield_flux(self, g):
        n = np.sqrt((g**2).sum(axis=1) + self.eta**2)
        return self.yield_coefficient * g / np.where(n > 0, n, 1.0)[:, None]

    def residual(self, x) -> np.ndarray:
        g, s = self._state(x)
        a = self.op(self.points, np.repeat(s, self.q), np.repeat(g, self.q, axis=0))
        flux = (a.reshape(-1, self.q, 2) * self.weights[..., None]).sum(axis=1)
        if self.yield_coefficient:
            flux = flux + self.disc.diamond_measure[:, None] * self._yield_flux(g)
        return self.G.T @ flux.ravel() - self.b

    def jacobian(self, x) -> sp.csr_matrix:
        g, s = self._state(x)
        nd = self.disc.n_diamonds
        ds, dxi = self.op.flux_jacobian(self.points, np.repeat(s, self.q), np.repeat(g, self.q, axis=0))
        w = self.weights
        dxi = (dxi.reshape(nd, self.q, 2, 2) * w[..., None, None]).sum(axis=1)
        ds = (ds.reshape(nd, self.q, 2) * w[..., None]).sum(axis=1)
        if self.yield_coefficient:
            n = np.sqrt((g**2).sum(axis=1) + self.eta**2)
            n = np.where(n > 0, n, 1.0)
            outer = np.einsum("ni,nj->nij", g, g) / n[:, None, None] ** 3
            dxi = dxi + (self.yield_coefficient * self.disc.diamond_measure)[:, None, None] * (
                np.eye(2)[None] / n[:, None, None] - outer
            )
        J = self.G.T @ _block_diag(dxi) @ self.G
        if np.any(ds):
            J = J + self.G.T @ _block_col(ds) @ self.P
        return J.tocsr()

    def energy(self, x) -> Optional[float]:
        if self.op.potential is None:
            return None
        g, _ = self._state(x)
        e = float((self.disc.diamond_measure * self.op.potential(g)).sum())
        if self.yield_coefficient:
            n = np.sqrt((g**2).sum(axis=1) + self.eta**2) - self.eta
            e += self.yield_coefficient * float((self.disc.diamond_measure * n).sum())
        return e - float(self.b @ x)


def _block_diag(blocks: np.ndarray) -> sp.csr_matrix:
    nd = blocks.shape[0]
    r = 2 * np.arange(nd)[:, None, None] + np.arange(2)[None, :, None]
    c = 2 * np.arange(nd)[:, None, None] + np.arange(2)[None, None, :]
    return sp.csr_matrix((blocks.ravel(), (np.broadcast_to(r, blocks.shape).ravel(),
                                           np.broadcast_to(c, blocks.shape).ravel())),
                         shape=(2 * nd, 2 * nd))


def _block_col(ds: np.ndarray) -> sp.csr_matrix:
    nd = ds.shape[0]
    rows = np.arange(2 * nd)
    cols = np.repeat(np.arange(nd), 2)
    return sp.csr_matrix((ds.ravel(), (rows, cols)), shape=(2 * nd, nd))


def _newton(form: NonlinearForm, x0: np.ndarray, fixed: np.ndarray, fixed_values: np.ndarray,
            options: SolverOptions) -> tuple:
    """Damped Newton on the free dofs; energy line search when a potential exists."""
    x = x0.copy()
    x[fixed] = fixed_values
    free = np.ones(len(x), dtype=bool)
    free[fixed] = False
    idx = np.flatnonzero(free)
    bscale = np.abs(form.b).sum() + 1.0
    use_energy = form.energy(x) is not None
    for it in range(options.newton_max_iter):
        R = form.residual(x)[idx]
        rn = np.abs(R).max(initial=0.0)
        if rn <= options.newton_tol * bscale:
            return x, it
        J = form.jacobian(x)[idx][:, idx].tocsc()
        try:
            dx = spla.splu(J).solve(-R)
        except RuntimeError as exc:
            raise NewtonDivergence(f"singular Newton system: {exc}") from exc
        if not np.all(np.isfinite(dx)):
            raise NewtonDivergence("non-finite Newton step")
        t = 1.0
        e0 = form.energy(x) if use_energy else None
        slope = float(R @ dx)
        for _ in range(40):
            y = x.copy()
            y[idx] += t * dx
            if use_energy:
                ok = form.energy(y) <= e0 + 1e-4 * t * slope or t * np.abs(dx).max() < 1e-14 * (1 + np.abs(x).max())
            else:
                ok = np.abs(form.residual(y)[idx]).max() <= (1 - 1e-4 * t) * rn
            if ok:
                break
            t *= 0.5
        else:
            raise NewtonDivergence("line search failed to reduce the merit function")
        x = y
    R = form.residual(x)[idx]
    if np.abs(R).max(initial=0.0) <= options.newton_tol * bscale:
        return x, options.newton_max_iter
    raise NewtonDivergence(f"Newton did not converge in {options.newton_max_iter} iterations "
                           f"(residual {np.abs(R).max():.3e})")


def _linear_guess(problem: VIProblem, fixed, fixed_values, options) -> np.ndarray:
    disc = problem.disc
    S = disc.stiffness()
    return condensed_solve(S, _rhs(problem), fixed, fixed_values, disc.mesh.n_cells, options.linear_rtol)


def solve_newton_vi(problem: VIProblem, options: Optional[SolverOptions] = None,
                    yield_coefficient: float = 0.0, eta: float = 0.0, x0: Optional[np.ndarray] = None
                    ) -> SolveReport:
    """Damped Newton inside an active-set loop, for any differentiable flux.

    Constraints (Gamma_3 faces or obstacle cells) are handled with the same set
    updates as the linear solvers; the multiplier of a constrained dof is minus
    its residual. The initial guess is the solution of the unconstrained linear
    problem with identity coefficient.
    """
    options = options or SolverOptions()
    t0 = time.perf_counter()
    disc = problem.disc
    mesh = disc.mesh
    nc = mesh.n_cells
    form = NonlinearForm(problem, yield_coefficient, eta)
    state = _initial_state(problem)
    if problem.model == SIGNORINI:
        dofs, bar = nc + problem.constrained_faces, problem.face_barrier
    elif problem.model == OBSTACLE:
        dofs, bar = state.ids, problem.cell_barrier[state.ids]
    else:
        dofs, bar = np.zeros(0, dtype=np.int64), np.zeros(0)
    base_fixed = nc + problem.fixed_faces
    if x0 is None:
        x = _linear_guess(problem, base_fixed, problem.fixed_values, options)
        if problem.model == OBSTACLE and len(dofs):
            x[dofs] = np.minimum(x[dofs], bar)
    else:
        x = np.array(x0, dtype=float)
    report = SolveReport(DiscreteVector.from_array(mesh, x), problem.model, "damped Newton + active set")
    u_tol = options.set_tol * (problem.face_scale() + np.abs(bar[np.isfinite(bar)]).max(initial=0.0))
    for outer in range(len(dofs) + 2):
        fixed = np.concatenate([base_fixed, dofs[state.active]])
        vals = np.concatenate([problem.fixed_values, bar[state.active]])
        x, its = _newton(form, x, fixed, vals, options)
        report.inner_iterations.append(its)
        report.outer_iterations = outer + 1
        if len(dofs) == 0:
            break
        R = form.residual(x)
        mult = -R[dofs]
        m_tol = options.set_tol * (np.abs(form.b).sum() + np.abs(R).max() + 1e-300)
        keep = state.active & (mult >= -m_tol)
        enter = ~state.active & (x[dofs] - bar > u_tol)
        new = keep | enter
        if np.array_equal(new, state.active):
            break
        state.active = new
    else:
        raise IterationCapExceeded("Newton active-set loop exceeded its cap")
    state.iterations = report.outer_iterations
    report.state = state if len(dofs) else None
    report.solution = DiscreteVector.from_array(mesh, x)
    R = form.residual(x)
    free = np.ones(disc.n_dofs, dtype=bool)
    free[np.concatenate([base_fixed, dofs[state.active]])] = False
    rs = np.abs(form.b).sum() + 1.0
    report.kkt = {"residual": float(np.abs(R[free]).max(initial=0.0) / rs)}
    if len(dofs):
        report.kkt["multiplier_min"] = float((-R[dofs[state.active]]).min(initial=0.0) / rs)
        report.kkt["barrier_gap_min"] = float((bar - x[dofs]).min() / (1 + np.abs(bar[np.isfinite(bar)]).max(initial=0)))
    report.wall_time = time.perf_counter() - t0
    return report


# ---- yield-stress model --------------------------------------------------------------


def bulkley_vi_residual(problem: VIProblem, u: DiscreteVector, probes=None) -> dict:
    """Violation of the yield-stress VI at ``u``.

    For a probe v the inequality reads
    int a(grad u).grad(u - v) + g int|grad u| - g int|grad v| - int f Pi(u - v) <= 0.
    The probes 0 and 2u together force equality in int a(grad u).grad u + g int|grad u| = int f u.
    """
    disc = problem.disc
    form = NonlinearForm(problem, 0.0, 0.0)
    x = u.array
    g, s = form._state(x)
    a = problem.operator(form.points, np.repeat(s, form.q), np.repeat(g, form.q, axis=0))
    aint = (a.reshape(-1, form.q, 2) * form.weights[..., None]).sum(axis=1)
    absgrad = lambda y: float((disc.diamond_measure * np.linalg.norm((disc.gradient_matrix @ y).reshape(-1, 2), axis=1)).sum())
    c = problem.yield_coefficient
    b = form.b
    gu = (disc.gradient_matrix @ x).reshape(-1, 2)

    def violation(y):
        gv = (disc.gradient_matrix @ y).reshape(-1, 2)
        return float((aint * (gu - gv)).sum() + c * absgrad(x) - c * absgrad(y) - b @ (x - y))

    scale = abs(float((aint * gu).sum())) + c * absgrad(x) + abs(float(b @ x)) + 1e-300
    out = {"probe_zero": violation(np.zeros_like(x)) / scale, "probe_double": violation(2 * x) / scale}
    if probes is not None:
        out["probe_max"] = max(violation(np.asarray(p)) for p in probes) / scale
    return out


def solve_bulkley(problem: VIProblem, options: Optional[SolverOptions] = None) -> SolveReport:
    """Yield-stress model with |xi| replaced by sqrt(|xi|^2 + eta^2) - eta.

    eta runs through eta0 * 10^-k, k = 0..eta_steps-1, each step warm-started from
    the previous one. The last iterate is returned with its VI residual.
    """
    if problem.model != BULKLEY:
        raise ValueError("solve_bulkley expects a yield-stress problem")
    options = options or SolverOptions()
    t0 = time.perf_counter()
    x0 = None
    inner, etas = [], []
    c = problem.yield_coefficient
    schedule = [options.eta0 * 10.0 ** (-k) for k in range(options.eta_steps)] if c > 0 else [0.0]
    for eta in schedule:
        rep = solve_newton_vi(problem, options, yield_coefficient=c, eta=eta, x0=x0)
        x0 = rep.solution.array
        inner.extend(rep.inner_iterations)
        etas.append(eta)
    rep.algorithm = "regularised damped Newton with eta continuation"
    rep.inner_iterations = inner
    rep.outer_iterations = len(schedule)
    rep.residual_history = etas
    rep.kkt.update(bulkley_vi_residual(problem, rep.solution))
    rep.kkt["eta_final"] = schedule[-1]
    rep.wall_time = time.perf_counter() - t0
    return rep


def solve(problem: VIProblem, options: Optional[SolverOptions] = None) -> SolveReport:
    """Dispatch to the solver matching the model and operator."""
    if problem.model == BULKLEY:
        return solve_bulkley(problem, options)
    if problem.operator.is_quasilinear:
        return solve_kacanov(problem, options)
    return solve_newton_vi(problem, options)
