"""Dam seepage benchmark, small obstacle and yield-stress demos, and refinement studies."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from hmmvi.diagnostics import diag_coercivity, diag_consistency, diag_limit_conformity
from hmmvi.gdm import DiscreteVector, HmmDiscretisation
from hmmvi.generators import cartesian, from_spec
from hmmvi.mesh import PolytopalMesh, Tag, regularity_report
from hmmvi.operators import HeavisideParams, OperatorSpec, p_laplacian, seepage_operator
from hmmvi.solvers import (
    BULKLEY,
    OBSTACLE,
    SIGNORINI,
    ActiveSetState,
    SolveReport,
    SolverOptions,
    VIProblem,
    assemble_fluxes,
    solve_bulkley,
    solve_kacanov,
    solve_obstacle,
)

UPSTREAM_HEAD = 5.0
DOWNSTREAM_HEAD = 1.0
# Gamma_1 is the vertical upstream face (head 5) plus the slanted face below y = 1 (head 1)
_HEAD_SWITCH_X = 3.5


class EmptyActiveSet(ValueError):
    """No constrained face is active, so there is no seepage face to report."""


def dam_head(x: np.ndarray) -> np.ndarray:
    """Prescribed head on Gamma_1: 5 on the upstream face, 1 on the lower slanted piece."""
    x = np.atleast_2d(x)
    return np.where(x[:, 0] < _HEAD_SWITCH_X, UPSTREAM_HEAD, DOWNSTREAM_HEAD)


def dam_problem(mesh: PolytopalMesh, params: HeavisideParams = HeavisideParams(),
                coefficient_rule: str = "cell") -> VIProblem:
    """Signorini seepage problem on a dam-tagged mesh, barrier at the face-centre ordinate."""
    if len(mesh.faces_with_tag(Tag.GAMMA1)) == 0 or len(mesh.faces_with_tag(Tag.GAMMA3)) == 0:
        raise ValueError("the dam problem needs faces tagged gamma1 and gamma3")
    disc = HmmDiscretisation(mesh)
    op = seepage_operator(params, coefficient_rule=coefficient_rule)
    return VIProblem(disc, op, SIGNORINI, source=0.0, dirichlet=dam_head, barrier=None)


def locate_seepage_point(state: ActiveSetState, mesh: PolytopalMesh) -> tuple:
    """Bracket the seepage point by the highest active face and the next constrained face above it.

    Returns ``(y_lo, y_hi)``; when the highest active face is also the highest
    constrained face both ends coincide.
    """
    active = state.A
    if len(active) == 0:
        raise EmptyActiveSet("no constrained face is active")
    ys = mesh.face_centres[state.ids, 1]
    y_lo = float(mesh.face_centres[active, 1].max())
    above = ys[ys > y_lo]
    y_hi = float(above.min()) if len(above) else y_lo
    return y_lo, y_hi


def darcy_velocity(disc: HmmDiscretisation, u: DiscreteVector, operator: OperatorSpec):
    """Velocity -a(x_K, u_K, grad_D u) on every diamond, and its |D|-weighted cell average."""
    x = disc.mesh.cell_centres[disc.diamond_cell]
    s = u.cell_values[disc.diamond_cell]
    vel = -np.asarray(operator(x, s, disc.gradient(u)), dtype=float)
    w = disc.diamond_measure
    n = disc.mesh.n_cells
    cell = np.stack([np.bincount(disc.diamond_cell, w * vel[:, c], minlength=n) for c in range(2)], axis=1)
    cell /= disc.mesh.cell_measures[:, None]
    return vel, cell


def streamline_seeds(mesh: PolytopalMesh, tag: Tag = Tag.GAMMA1, n: int = 20) -> np.ndarray:
    """Evenly spaced seed points on the faces with ``tag``, for external streamline tracing."""
    faces = mesh.faces_with_tag(tag)
    if len(faces) == 0:
        return np.zeros((0, 2))
    lengths = mesh.face_measures[faces]
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    targets = (np.arange(n) + 0.5) / n * cum[-1]
    idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(faces) - 1)
    t = (targets - cum[idx]) / lengths[idx]
    ends = mesh.vertices[mesh.face_vertices[faces[idx]]]
    a, b = ends[:, 0], ends[:, 1]
    return a + t[:, None] * (b - a)


@dataclass
class SeepageResult:
    report: SolveReport
    interval: tuple
    constrained_faces: np.ndarray
    # True where the face is held at the barrier, False where its flux vanishes
    at_barrier: np.ndarray
    velocity: np.ndarray
    cell_velocity: np.ndarray
    boundary_flux: dict = field(default_factory=dict)
    mesh_info: dict = field(default_factory=dict)

    @property
    def seepage_ordinate(self) -> float:
        return self.interval[0]

    def summary(self) -> dict:
        out = {
            "seepage_interval": [float(self.interval[0]), float(self.interval[1])],
            "n_constrained": int(len(self.constrained_faces)),
            "n_at_barrier": int(self.at_barrier.sum()),
            "boundary_flux": {k: float(v) for k, v in self.boundary_flux.items()},
            "mesh": self.mesh_info,
        }
        out.update(self.report.summary())
        return out


def _mesh_info(mesh: PolytopalMesh) -> dict:
    return {
        "n_cells": int(mesh.n_cells),
        "n_faces": int(mesh.n_faces),
        "n_gamma3": int(len(mesh.faces_with_tag(Tag.GAMMA3))),
        "h_mesh": float(mesh.h_mesh),
    }


def _as_mesh(mesh: Union[str, PolytopalMesh]) -> PolytopalMesh:
    return from_spec(mesh) if isinstance(mesh, str) else mesh


def run_dam_benchmark(mesh: Union[str, PolytopalMesh] = "dam-hex:441", options: Optional[SolverOptions] = None,
                      params: HeavisideParams = HeavisideParams(), coefficient_rule: str = "cell") -> SeepageResult:
    """Solve the dam seepage problem with the Kacanov iteration and post-process it."""
    mesh = _as_mesh(mesh)
    problem = dam_problem(mesh, params, coefficient_rule)
    report = solve_kacanov(problem, options)
    state = report.state
    interval = locate_seepage_point(state, mesh)
    u = report.linear_solution if report.linear_solution is not None else report.solution
    disc = problem.disc
    vel, cell_vel = darcy_velocity(disc, u, problem.operator)
    fl = assemble_fluxes(disc, problem.operator, report.solution)
    F = fl.fluxes(u.array)
    bd = disc.boundary_diamond()
    net = {}
    for tag in (Tag.GAMMA1, Tag.GAMMA2, Tag.GAMMA3):
        faces = mesh.faces_with_tag(tag)
        net[tag.value] = float((F[bd[faces]] * mesh.face_measures[faces]).sum()) if len(faces) else 0.0
    return SeepageResult(
        report=report,
        interval=interval,
        constrained_faces=state.ids.copy(),
        at_barrier=state.active.copy(),
        velocity=vel,
        cell_velocity=cell_vel,
        boundary_flux=net,
        mesh_info=_mesh_info(mesh),
    )


# ---- small demo problems ------------------------------------------------------------


def binding_obstacle_problem(n: int = 3, source: float = 20.0, obstacle: float = 1.2) -> VIProblem:
    """Laplacian on an n x n unit-square grid with a constant obstacle the free solution exceeds."""
    disc = HmmDiscretisation(cartesian(n))
    return VIProblem(disc, p_laplacian(2.0), OBSTACLE, source=source, dirichlet=0.0, barrier=obstacle)


def obstacle_demo(n: int = 3, source: float = 20.0, obstacle: float = 1.2,
                  options: Optional[SolverOptions] = None) -> SolveReport:
    return solve_obstacle(binding_obstacle_problem(n, source, obstacle), options)


def bulkley_problem(n: int = 8, source: float = 1.0, yield_coefficient: float = 0.1, p: float = 2.0) -> VIProblem:
    disc = HmmDiscretisation(cartesian(n), p=p)
    return VIProblem(disc, p_laplacian(p), BULKLEY, source=source, dirichlet=0.0,
                     yield_coefficient=yield_coefficient)


def bulkley_demo(n: int = 8, source: float = 1.0, yield_coefficient: float = 0.1, p: float = 2.0,
                 options: Optional[SolverOptions] = None) -> SolveReport:
    return solve_bulkley(bulkley_problem(n, source, yield_coefficient, p), options)


# ---- refinement studies -------------------------------------------------------------


def box_sine(mesh: PolytopalMesh):
    """sin(pi X) sin(pi Y) in coordinates rescaled to the mesh bounding box, with its gradient."""
    lo = mesh.vertices.min(axis=0)
    span = mesh.vertices.max(axis=0) - lo

    def phi(x):
        t = (np.atleast_2d(x) - lo) / span
        return np.sin(np.pi * t[:, 0]) * np.sin(np.pi * t[:, 1])

    def grad(x):
        t = (np.atleast_2d(x) - lo) / span
        gx = np.pi / span[0] * np.cos(np.pi * t[:, 0]) * np.sin(np.pi * t[:, 1])
        gy = np.pi / span[1] * np.sin(np.pi * t[:, 0]) * np.cos(np.pi * t[:, 1])
        return np.stack([gx, gy], axis=1)

    return phi, grad


def shear_field(x):
    """A smooth vector field with zero normal component on y = 0."""
    x = np.atleast_2d(x)
    return np.stack([x[:, 1] * np.sin(x[:, 0]), x[:, 1] * np.cos(x[:, 0])], axis=1)


def shear_field_div(x):
    x = np.atleast_2d(x)
    return (1.0 + x[:, 1]) * np.cos(x[:, 0])


STUDY_COLUMNS = ("mesh", "n_cells", "h_mesh", "theta", "consistency", "conformity", "coercivity",
                 "outer_iterations", "relaxation_events", "seepage_lo", "seepage_hi", "status")


@dataclass
class StudyRow:
    mesh: str
    n_cells: int = 0
    h_mesh: float = math.nan
    theta: float = math.nan
    consistency: float = math.nan
    conformity: float = math.nan
    coercivity: float = math.nan
    outer_iterations: Optional[int] = None
    relaxation_events: Optional[int] = None
    seepage_lo: float = math.nan
    seepage_hi: float = math.nan
    status: str = "ok"

    @property
    def failed(self) -> bool:
        return self.status != "ok"

    def values(self) -> list:
        return [getattr(self, c) for c in STUDY_COLUMNS]


def _study_row(item, family: str, options: Optional[SolverOptions], coercivity: bool) -> StudyRow:
    label = item if isinstance(item, str) else f"mesh[{item.n_cells}]"
    row = StudyRow(label)
    try:
        mesh = _as_mesh(item)
        row.n_cells = mesh.n_cells
        reg = regularity_report(mesh)
        row.h_mesh, row.theta = reg.h_mesh, reg.theta
        disc = HmmDiscretisation(mesh)
        phi, grad = box_sine(mesh)
        row.consistency = diag_consistency(disc, phi, grad).value
        row.conformity = diag_limit_conformity(disc, shear_field, shear_field_div).value
        if coercivity:
            row.coercivity = diag_coercivity(disc).value
        if family == "dam":
            res = run_dam_benchmark(mesh, options)
            row.outer_iterations = res.report.outer_iterations
            row.relaxation_events = len(res.report.relaxation_events)
            row.seepage_lo, row.seepage_hi = res.interval
    except Exception as exc:  # a failing row is reported, the study goes on
        row.status = f"failed: {type(exc).__name__}: {exc}"
    return row


def run_refinement_study(meshes: Sequence[Union[str, PolytopalMesh]], family: str = "diagnostics",
                         options: Optional[SolverOptions] = None, jobs: int = 1, coercivity: bool = False) -> list:
    """One row per mesh with h, theta, S_D and W_D estimates, and dam results for ``family="dam"``.

    ``coercivity`` adds the C_D estimate, which needs faces with fixed values.

    Rows are independent; with ``jobs > 1`` they run in a process pool. Output order
    follows the input order either way.
    """
    if family not in ("diagnostics", "dam"):
        raise ValueError(f"unknown study family {family!r}")
    meshes = list(meshes)
    if jobs > 1 and len(meshes) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [pool.submit(_study_row, m, family, options, coercivity) for m in meshes]
            return [f.result() for f in futs]
    return [_study_row(m, family, options, coercivity) for m in meshes]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def study_csv(rows: Sequence[StudyRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STUDY_COLUMNS)
    for r in rows:
        w.writerow([_fmt(v) for v in r.values()])
    return buf.getvalue()


def loglog_slope(h: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of log(values) against log(h)."""
    return float(np.polyfit(np.log(h), np.log(values), 1)[0])
