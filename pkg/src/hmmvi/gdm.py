"""The HMM gradient discretisation on a polytopal mesh.

Degrees of freedom are ordered cells first, then faces: ``x = [v_K..., v_sigma...]``.
Diamonds D_{K,sigma} are numbered cell by cell, following each cell's face order,
so diamond ``k`` belongs to ``diamond_cell[k]`` and ``diamond_face[k]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np
import scipy.sparse as sp

from hmmvi.mesh import PolytopalMesh, Tag, regularity_report
from hmmvi.quadrature import disc_rule, gauss_segment, triangle_points


class QuadratureFailure(ArithmeticError):
    pass


@dataclass
class DiscreteVector:
    """An element of X_D: one value per cell and one per face."""

    cell_values: np.ndarray
    face_values: np.ndarray

    def __post_init__(self):
        self.cell_values = np.asarray(self.cell_values, dtype=float)
        self.face_values = np.asarray(self.face_values, dtype=float)

    @classmethod
    def zeros(cls, mesh: PolytopalMesh) -> "DiscreteVector":
        return cls(np.zeros(mesh.n_cells), np.zeros(mesh.n_faces))

    @classmethod
    def constant(cls, mesh: PolytopalMesh, c: float) -> "DiscreteVector":
        return cls(np.full(mesh.n_cells, float(c)), np.full(mesh.n_faces, float(c)))

    @classmethod
    def from_array(cls, mesh: PolytopalMesh, x) -> "DiscreteVector":
        x = np.asarray(x, dtype=float)
        if x.shape != (mesh.n_cells + mesh.n_faces,):
            raise ValueError(f"expected {mesh.n_cells + mesh.n_faces} values, got {x.shape}")
        return cls(x[: mesh.n_cells].copy(), x[mesh.n_cells:].copy())

    @property
    def array(self) -> np.ndarray:
        return np.concatenate([self.cell_values, self.face_values])

    def conforms(self, mesh: PolytopalMesh) -> bool:
        return (
            self.cell_values.shape == (mesh.n_cells,)
            and self.face_values.shape == (mesh.n_faces,)
            and bool(np.all(np.isfinite(self.cell_values)))
            and bool(np.all(np.isfinite(self.face_values)))
        )

    def max_norm(self) -> float:
        return float(max(np.abs(self.cell_values).max(initial=0.0), np.abs(self.face_values).max(initial=0.0)))

    def __add__(self, other: "DiscreteVector") -> "DiscreteVector":
        return DiscreteVector(self.cell_values + other.cell_values, self.face_values + other.face_values)

    def __sub__(self, other: "DiscreteVector") -> "DiscreteVector":
        return DiscreteVector(self.cell_values - other.cell_values, self.face_values - other.face_values)

    def __mul__(self, c: float) -> "DiscreteVector":
        return DiscreteVector(c * self.cell_values, c * self.face_values)

    __rmul__ = __mul__


@dataclass
class CellGroup:
    """Cells sharing a face count, with their local operators stacked.

    Local dofs of a cell are ``[v_K, v_sigma_1, ..., v_sigma_n]``.
    """

    cells: np.ndarray  # (m,)
    dofs: np.ndarray  # (m, 1+n)
    faces: np.ndarray  # (m, n)
    diamonds: np.ndarray  # (m, n)
    area: np.ndarray  # (m,)
    sigma: np.ndarray  # (m, n)
    normals: np.ndarray  # (m, n, 2)
    dist: np.ndarray  # (m, n)
    grad_cell: np.ndarray  # (m, 2, 1+n), nabla_K
    residual: np.ndarray  # (m, n, 1+n), R_K
    grad: np.ndarray  # (m, n, 2, 1+n), nabla_D on each diamond

    @property
    def n(self) -> int:
        return self.faces.shape[1]


class HmmDiscretisation:
    """Function, trace and gradient reconstructions of the HMM scheme.

    The stabilisation A_K is ``stabilisation`` times the identity on Im(R_K).
    """

    def __init__(self, mesh: PolytopalMesh, p: float = 2.0, stabilisation: float = 1.0):
        if not p > 1.0:
            raise ValueError("exponent p must lie in (1, inf)")
        if stabilisation <= 0:
            raise ValueError("stabilisation scale must be positive")
        self.mesh = mesh
        self.p = float(p)
        self.stabilisation = float(stabilisation)
        nc, nf = mesh.n_cells, mesh.n_faces
        self.n_dofs = nc + nf
        d = mesh.dimension

        counts = np.array([len(f) for f in mesh.cell_faces])
        self.diamond_start = np.concatenate([[0], np.cumsum(counts)])
        self.n_diamonds = int(self.diamond_start[-1])
        self.diamond_cell = np.repeat(np.arange(nc), counts)
        self.diamond_face = np.concatenate(mesh.cell_faces)
        sig = mesh.face_measures[self.diamond_face]
        dist = np.concatenate(mesh.cell_face_distances)
        self.diamond_measure = sig * dist / d

        fv = mesh.face_vertices[self.diamond_face]
        self.diamond_triangles = np.stack(
            [mesh.cell_centres[self.diamond_cell], mesh.vertices[fv[:, 0]], mesh.vertices[fv[:, 1]]], axis=1
        )
        self.diamond_centroids = self.diamond_triangles.mean(axis=1)

        self.groups = []
        for n in np.unique(counts):
            cells = np.flatnonzero(counts == n)
            faces = np.array([mesh.cell_faces[K] for K in cells])
            signs = np.array([mesh.cell_face_signs[K] for K in cells])
            normals = mesh.face_normals[faces] * signs[..., None]
            area = mesh.cell_measures[cells]
            sigma = mesh.face_measures[faces]
            dist_g = np.array([mesh.cell_face_distances[K] for K in cells])
            offs = mesh.face_centres[faces] - mesh.cell_centres[cells][:, None, :]
            m = len(cells)
            gk = np.zeros((m, d, 1 + n))
            gk[:, :, 1:] = np.transpose(sigma[..., None] * normals, (0, 2, 1)) / area[:, None, None]
            res = np.zeros((m, n, 1 + n))
            res[:, :, 0] = -1.0
            res[:, :, 1:] = np.eye(n)[None]
            res -= np.einsum("mnc,mcj->mnj", offs, gk)
            stab = (math.sqrt(d) * self.stabilisation / dist_g)[..., None, None] * normals[..., :, None]
            grad = gk[:, None, :, :] + stab * res[:, :, None, :]
            dofs = np.column_stack([cells, nc + faces])
            diamonds = self.diamond_start[cells][:, None] + np.arange(n)[None, :]
            self.groups.append(
                CellGroup(cells, dofs, faces, diamonds, area, sigma, normals, dist_g, gk, res, grad)
            )

        rows, cols, vals = [], [], []
        for g in self.groups:
            m, n = g.faces.shape
            r = (2 * g.diamonds)[:, :, None, None] + np.arange(d)[None, None, :, None]
            c = np.broadcast_to(g.dofs[:, None, None, :], (m, n, d, 1 + n))
            rows.append(np.broadcast_to(r, (m, n, d, 1 + n)).ravel())
            cols.append(c.ravel())
            vals.append(g.grad.ravel())
        self.gradient_matrix = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(d * self.n_diamonds, self.n_dofs),
        )

    # ---- reconstructions -----------------------------------------------

    def _check(self, v: DiscreteVector) -> None:
        if not v.conforms(self.mesh):
            raise ValueError("discrete vector does not conform to the mesh")

    def function(self, v: DiscreteVector) -> np.ndarray:
        self._check(v)
        return v.cell_values.copy()

    def trace(self, v: DiscreteVector) -> np.ndarray:
        """Trace values on ``mesh.boundary_faces``, in that order."""
        self._check(v)
        return v.face_values[self.mesh.boundary_faces].copy()

    def gradient(self, v) -> np.ndarray:
        """Gradient on every diamond, shape (n_diamonds, 2)."""
        x = v.array if isinstance(v, DiscreteVector) else np.asarray(v, dtype=float)
        return (self.gradient_matrix @ x).reshape(self.n_diamonds, -1)

    def cell_gradient(self, v: DiscreteVector) -> np.ndarray:
        """nabla_K v for every cell, shape (n_cells, 2)."""
        out = np.zeros((self.mesh.n_cells, self.mesh.dimension))
        x = v.array
        for g in self.groups:
            out[g.cells] = np.einsum("mcj,mj->mc", g.grad_cell, x[g.dofs])
        return out

    def residual_map(self, v: DiscreteVector) -> list:
        """R_K(v) for every cell, as a list indexed by cell."""
        out = [None] * self.mesh.n_cells
        x = v.array
        for g in self.groups:
            r = np.einsum("mnj,mj->mn", g.residual, x[g.dofs])
            for i, K in enumerate(g.cells):
                out[K] = r[i]
        return out

    # ---- norms -----------------------------------------------------------

    def norm_function(self, v, p: Optional[float] = None) -> float:
        p = self.p if p is None else p
        cv = v.cell_values if isinstance(v, DiscreteVector) else np.asarray(v)
        return float((self.mesh.cell_measures * np.abs(cv) ** p).sum() ** (1.0 / p))

    def norm_gradient(self, v, p: Optional[float] = None) -> float:
        p = self.p if p is None else p
        gr = self.gradient(v)
        return float((self.diamond_measure * np.hypot(gr[:, 0], gr[:, 1]) ** p).sum() ** (1.0 / p))

    def norm_trace(self, v: DiscreteVector, p: Optional[float] = None, faces=None) -> float:
        p = self.p if p is None else p
        faces = self.mesh.boundary_faces if faces is None else faces
        return float((self.mesh.face_measures[faces] * np.abs(v.face_values[faces]) ** p).sum() ** (1.0 / p))

    # ---- bilinear forms and fluxes ----------------------------------------

    def local_matrices(self, diamond_weights, tensor=None) -> list:
        """Per-group local matrices of  sum_D w_D (T grad_D u) . grad_D v.

        ``diamond_weights`` holds, for each diamond, the integral over D of the
        scalar coefficient; ``tensor`` is a constant d x d matrix (identity by
        default).
        """
        w = np.asarray(diamond_weights, dtype=float)
        if w.shape == ():
            w = np.full(self.n_diamonds, float(w))
        out = []
        for g in self.groups:
            wg = w[g.diamonds]
            tg = g.grad if tensor is None else np.einsum("ab,mnbj->mnaj", np.asarray(tensor), g.grad)
            out.append(np.einsum("mn,mnai,mnaj->mij", wg, g.grad, tg))
        return out

    def assemble(self, local: Iterable[np.ndarray]) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        for g, S in zip(self.groups, local):
            k = g.dofs.shape[1]
            rows.append(np.repeat(g.dofs, k, axis=1).ravel())
            cols.append(np.tile(g.dofs, (1, k)).ravel())
            vals.append(S.ravel())
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_dofs, self.n_dofs),
        )

    def stiffness(self, diamond_weights=None, tensor=None) -> sp.csr_matrix:
        if diamond_weights is None:
            diamond_weights = self.diamond_measure
        return self.assemble(self.local_matrices(diamond_weights, tensor))

    def fluxes(self, u, local: list) -> np.ndarray:
        """F_{K,sigma}(u) on every diamond from the local matrices.

        Defined by  sum_sigma |sigma| F_{K,sigma}(u) (v_K - v_sigma) = a_K(u, v)
        for all v, so F_{K,sigma} = -(S_K u)_sigma / |sigma|.
        """
        x = u.array if isinstance(u, DiscreteVector) else np.asarray(u, dtype=float)
        F = np.zeros(self.n_diamonds)
        for g, S in zip(self.groups, local):
            Su = np.einsum("mij,mj->mi", S, x[g.dofs])
            F[g.diamonds] = -Su[:, 1:] / g.sigma
        return F

    def cell_balance(self, u, local: list) -> np.ndarray:
        """sum_sigma |sigma| F_{K,sigma}(u) for every cell."""
        x = u.array if isinstance(u, DiscreteVector) else np.asarray(u, dtype=float)
        out = np.zeros(self.mesh.n_cells)
        for g, S in zip(self.groups, local):
            out[g.cells] = np.einsum("mj,mj->m", S[:, 0, :], x[g.dofs])
        return out

    def boundary_diamond(self) -> np.ndarray:
        """Diamond index of each boundary face (its single cell), -1 elsewhere."""
        idx = np.full(self.mesh.n_faces, -1, dtype=np.int64)
        bnd = np.zeros(self.mesh.n_faces, dtype=bool)
        bnd[self.mesh.boundary_faces] = True
        sel = bnd[self.diamond_face]
        idx[self.diamond_face[sel]] = np.flatnonzero(sel)
        return idx

    # ---- quadrature on the mesh ----------------------------------------------

    def diamond_quadrature(self, degree: int = 5):
        """Points (n_diamonds, q, 2) and weights (n_diamonds, q) on each diamond."""
        return triangle_points(self.diamond_triangles, degree)

    def integrate(self, f: Callable, degree: int = 5) -> float:
        pts, w = self.diamond_quadrature(degree)
        vals = np.asarray(f(pts.reshape(-1, 2)), dtype=float).reshape(w.shape)
        return float((vals * w).sum())

    def regularity(self):
        return regularity_report(self.mesh)


# ---- reconstructions as free functions --------------------------------------------


def reconstruct_function(disc: HmmDiscretisation, v: DiscreteVector) -> np.ndarray:
    """Pi_D v: the value of v_K on each cell."""
    return disc.function(v)


def reconstruct_trace(disc: HmmDiscretisation, v: DiscreteVector) -> np.ndarray:
    """T_D v: the value v_sigma on each boundary face (ordered as ``mesh.boundary_faces``)."""
    return disc.trace(v)


def reconstruct_gradient(disc: HmmDiscretisation, v: DiscreteVector) -> np.ndarray:
    """nabla_D v on each diamond."""
    disc._check(v)
    return disc.gradient(v)


# ---- interpolants ----------------------------------------------------------------


def face_averages(mesh: PolytopalMesh, g: Callable, faces=None, n_points: int = 3) -> np.ndarray:
    """(1/|sigma|) int_sigma g by Gauss-Legendre quadrature on each face."""
    faces = np.arange(mesh.n_faces) if faces is None else np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        return np.zeros(0)
    t, w = gauss_segment(n_points)
    a = mesh.vertices[mesh.face_vertices[faces, 0]]
    b = mesh.vertices[mesh.face_vertices[faces, 1]]
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    vals = np.asarray(g(pts.reshape(-1, 2)), dtype=float).reshape(len(faces), len(t))
    if not np.all(np.isfinite(vals)):
        raise QuadratureFailure("boundary data evaluates to a non-finite value")
    return vals @ w


def interpolate_boundary(disc: HmmDiscretisation, g: Callable, part=(Tag.GAMMA1,), n_points: int = 3
                         ) -> DiscreteVector:
    """I_{D,part} g: face averages of g on faces tagged ``part``, zero elsewhere."""
    mesh = disc.mesh
    if isinstance(part, (str, Tag)):
        part = (part,)
    faces = mesh.faces_with_tag(*part)
    v = DiscreteVector.zeros(mesh)
    v.face_values[faces] = face_averages(mesh, g, faces, n_points)
    return v


def interpolate_pointwise(disc: HmmDiscretisation, phi: Callable) -> DiscreteVector:
    """Values of phi at the cell centres and face centres of mass."""
    mesh = disc.mesh
    return DiscreteVector(np.asarray(phi(mesh.cell_centres), dtype=float),
                          np.asarray(phi(mesh.face_centres), dtype=float))


@dataclass(frozen=True)
class WeightFamily:
    """Weights omega_K = |K|/|B_K| on the ball B_K = B(x_K, h_K / varrho), zero outside."""

    centres: np.ndarray
    radii: np.ndarray
    magnitudes: np.ndarray
    varrho: float
    dimension: int = 2

    def evaluate(self, K: int, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        inside = np.hypot(*(x - self.centres[K]).T) < self.radii[K]
        return np.where(inside, self.magnitudes[K], 0.0)

    @property
    def bound(self) -> float:
        return self.varrho ** self.dimension

    def moments(self, K: int, n_radial: int = 8, n_angular: int = 24):
        """(int omega_K, int x omega_K) by quadrature on the ball."""
        pts, w = disc_rule(n_radial, n_angular)
        r = self.radii[K]
        ball = math.pi * r**2
        x = self.centres[K] + r * pts
        total = self.magnitudes[K] * ball * w.sum()
        first = self.magnitudes[K] * ball * (w[:, None] * x).sum(axis=0)
        return total, first


def inscribed_ball_weights(mesh: PolytopalMesh) -> WeightFamily:
    """The weight family built on balls of radius h_K / varrho around each x_K."""
    varrho = max(float(mesh.cell_diameters[K] / d.min()) for K, d in enumerate(mesh.cell_face_distances))
    radii = mesh.cell_diameters / varrho
    mags = mesh.cell_measures / (math.pi * radii**2)
    return WeightFamily(mesh.cell_centres.copy(), radii, mags, varrho)


def interpolate_full(disc: HmmDiscretisation, phi: Callable, weights: Optional[WeightFamily] = None,
                     n_radial: int = 8, n_angular: int = 24, n_face: int = 3) -> DiscreteVector:
    """P^omega_D phi: weighted cell means and face averages of phi.

    With ball weights the cell value is the mean of phi over B_K, computed with
    the disc rule of ``quadrature.disc_rule``.
    """
    mesh = disc.mesh
    weights = inscribed_ball_weights(mesh) if weights is None else weights
    pts, w = disc_rule(n_radial, n_angular)
    x = weights.centres[:, None, :] + weights.radii[:, None, None] * pts[None, :, :]
    vals = np.asarray(phi(x.reshape(-1, 2)), dtype=float).reshape(mesh.n_cells, len(w))
    if not np.all(np.isfinite(vals)):
        raise QuadratureFailure("function evaluates to a non-finite value")
    ball = math.pi * weights.radii**2
    cell = weights.magnitudes * ball / mesh.cell_measures * (vals @ w)
    return DiscreteVector(cell, face_averages(mesh, phi, None, n_face))


def discrete_seminorm(disc: HmmDiscretisation, v: DiscreteVector, p: Optional[float] = None) -> float:
    """|v|_{T,p} = (sum_K sum_sigma |sigma| d_{K,sigma} |(v_sigma - v_K)/d_{K,sigma}|^p)^(1/p)."""
    p = disc.p if p is None else float(p)
    if not p > 1.0:
        raise ValueError("p must lie in (1, inf)")
    mesh = disc.mesh
    sig = mesh.face_measures[disc.diamond_face]
    dist = disc.diamond_measure * mesh.dimension / sig
    jump = v.face_values[disc.diamond_face] - v.cell_values[disc.diamond_cell]
    return float((sig * dist * np.abs(jump / dist) ** p).sum() ** (1.0 / p))
