"""Polytopal meshes: cells, faces, centres and the geometric quantities used by HMM.

Only two-dimensional polygonal meshes are built here. A mesh stores flat numpy
arrays; the ``cells`` and ``faces`` properties give read-only record views.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Mapping, Optional, Sequence

import numpy as np


class Tag(str, enum.Enum):
    INTERIOR = "interior"
    GAMMA1 = "gamma1"
    GAMMA2 = "gamma2"
    GAMMA3 = "gamma3"
    DIRICHLET = "dirichlet"
    NONE = "none"

    @classmethod
    def parse(cls, value) -> "Tag":
        if isinstance(value, Tag):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown boundary tag {value!r}") from None


class MeshError(ValueError):
    """Base class for invalid mesh input."""


class NonStarShaped(MeshError):
    def __init__(self, cell: int, face: int, distance: float):
        super().__init__(
            f"cell {cell} is not strictly star-shaped w.r.t. its centre: "
            f"d_K,sigma = {distance:.3e} for face {face}"
        )
        self.cell = cell
        self.face = face


class DanglingFace(MeshError):
    pass


class UntaggedBoundary(MeshError):
    pass


@dataclass(frozen=True)
class Cell:
    index: int
    vertex_ids: tuple
    face_ids: tuple
    centre: np.ndarray
    measure: float
    diameter: float


@dataclass(frozen=True)
class Face:
    index: int
    vertex_ids: tuple
    vertices: np.ndarray
    measure: float
    centre: np.ndarray
    diameter: float
    cells: tuple
    tag: Tag

    @property
    def is_boundary(self) -> bool:
        return len(self.cells) == 1


@dataclass(frozen=True)
class RegularityReport:
    theta_shape: float
    theta_neighbour: float
    theta: float
    varrho: float
    h_mesh: float

    def as_dict(self) -> dict:
        return {
            "theta_shape": self.theta_shape,
            "theta_neighbour": self.theta_neighbour,
            "theta": self.theta,
            "varrho": self.varrho,
            "h_mesh": self.h_mesh,
        }


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class PolytopalMesh:
    """A 2D polytopal mesh with per-cell centres and tagged boundary faces.

    ``face_normals[s]`` is the unit normal of face ``s`` pointing out of
    ``face_cells[s, 0]``; ``cell_face_signs[K][i]`` is +1 when that normal is
    also outward for cell ``K``.
    """

    dimension = 2

    def __init__(
        self,
        vertices,
        cell_vertices,
        face_vertices,
        face_cells,
        face_tags,
        cell_faces,
        cell_face_signs,
        cell_centres,
    ):
        self.vertices = _frozen(np.asarray(vertices, dtype=float))
        self.cell_vertices = tuple(_frozen(np.asarray(c, dtype=np.int64)) for c in cell_vertices)
        self.face_vertices = _frozen(np.asarray(face_vertices, dtype=np.int64))
        self.face_cells = _frozen(np.asarray(face_cells, dtype=np.int64))
        self.face_tags = tuple(Tag.parse(t) for t in face_tags)
        self.cell_faces = tuple(_frozen(np.asarray(c, dtype=np.int64)) for c in cell_faces)
        self.cell_face_signs = tuple(_frozen(np.asarray(s, dtype=float)) for s in cell_face_signs)

        a = self.vertices[self.face_vertices[:, 0]]
        b = self.vertices[self.face_vertices[:, 1]]
        edge = b - a
        self.face_measures = _frozen(np.hypot(edge[:, 0], edge[:, 1]))
        self.face_centres = _frozen(0.5 * (a + b))
        # (b - a) rotated clockwise is outward for a cell traversing a -> b counter-clockwise
        self.face_normals = _frozen(np.column_stack([edge[:, 1], -edge[:, 0]]) / self.face_measures[:, None])

        areas, centroids, diam = [], [], []
        for vids in self.cell_vertices:
            # local coordinates keep the shoelace sums accurate for small cells far from the origin
            origin = self.vertices[vids[0]]
            p = self.vertices[vids] - origin
            q = np.roll(p, -1, axis=0)
            cross = p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]
            area = 0.5 * cross.sum()
            areas.append(area)
            centroids.append(origin + ((p + q) * cross[:, None]).sum(axis=0) / (6.0 * area))
            diff = p[:, None, :] - p[None, :, :]
            diam.append(np.sqrt((diff**2).sum(-1)).max())
        self.cell_measures = _frozen(np.array(areas))
        self.cell_diameters = _frozen(np.array(diam))
        if cell_centres is None:
            cell_centres = np.array(centroids)
        self.cell_centres = _frozen(np.asarray(cell_centres, dtype=float))

        dist = []
        for K, (fids, sg) in enumerate(zip(self.cell_faces, self.cell_face_signs)):
            n = self.face_normals[fids] * sg[:, None]
            dist.append(((self.face_centres[fids] - self.cell_centres[K]) * n).sum(axis=1))
        self.cell_face_distances = tuple(_frozen(d) for d in dist)

    # ---- sizes and index sets -------------------------------------------

    @property
    def n_cells(self) -> int:
        return len(self.cell_vertices)

    @property
    def n_faces(self) -> int:
        return len(self.face_vertices)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @cached_property
    def boundary_faces(self) -> np.ndarray:
        return _frozen(np.flatnonzero(self.face_cells[:, 1] < 0))

    @cached_property
    def interior_faces(self) -> np.ndarray:
        return _frozen(np.flatnonzero(self.face_cells[:, 1] >= 0))

    def faces_with_tag(self, *tags) -> np.ndarray:
        wanted = {Tag.parse(t) for t in tags}
        return np.array([s for s, t in enumerate(self.face_tags) if t in wanted], dtype=np.int64)

    @property
    def h_mesh(self) -> float:
        return float(self.cell_diameters.max())

    @property
    def total_measure(self) -> float:
        return float(self.cell_measures.sum())

    def cell_normals(self, K: int) -> np.ndarray:
        """Outward unit normals n_{K,sigma} of cell ``K``, in face order."""
        return self.face_normals[self.cell_faces[K]] * self.cell_face_signs[K][:, None]

    # ---- record views ---------------------------------------------------

    @cached_property
    def cells(self) -> list:
        return [
            Cell(
                index=K,
                vertex_ids=tuple(int(v) for v in self.cell_vertices[K]),
                face_ids=tuple(int(s) for s in self.cell_faces[K]),
                centre=self.cell_centres[K],
                measure=float(self.cell_measures[K]),
                diameter=float(self.cell_diameters[K]),
            )
            for K in range(self.n_cells)
        ]

    @cached_property
    def faces(self) -> list:
        out = []
        for s in range(self.n_faces):
            cells = tuple(int(c) for c in self.face_cells[s] if c >= 0)
            out.append(
                Face(
                    index=s,
                    vertex_ids=tuple(int(v) for v in self.face_vertices[s]),
                    vertices=self.vertices[self.face_vertices[s]],
                    measure=float(self.face_measures[s]),
                    centre=self.face_centres[s],
                    diameter=float(self.face_measures[s]),
                    cells=cells,
                    tag=self.face_tags[s],
                )
            )
        return out

    def with_tags(self, tag_rule: Callable) -> "PolytopalMesh":
        """Copy of the mesh with boundary faces re-tagged by ``tag_rule(a, b)``."""
        return build_mesh(
            self.vertices,
            [list(c) for c in self.cell_vertices],
            tag_rule=tag_rule,
            centres=self.cell_centres,
        )

    def __repr__(self) -> str:
        return f"PolytopalMesh(cells={self.n_cells}, faces={self.n_faces}, h={self.h_mesh:.4g})"


def build_mesh(
    vertices: Sequence,
    cells: Sequence[Sequence[int]],
    tag_rule: Optional[Callable] = None,
    boundary_tags: Optional[Mapping] = None,
    default_tag=None,
    centres=None,
) -> PolytopalMesh:
    """Build a mesh from vertex coordinates and counter-clockwise cell connectivity.

    Boundary faces are tagged, in order of precedence, by ``boundary_tags``
    (a mapping from a vertex pair to a tag), by ``tag_rule(a, b)`` (endpoint
    coordinates to a tag or None), and finally by ``default_tag``. Cell centres
    default to the centres of mass.
    """
    vertices = np.asarray(vertices, dtype=float)
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise MeshError("vertices must be an (n, 2) array")
    if not np.all(np.isfinite(vertices)):
        raise MeshError("vertex coordinates must be finite")

    face_index: dict = {}
    face_vertices: list = []
    face_cells: list = []
    cell_faces: list = []
    cell_signs: list = []
    for K, cell in enumerate(cells):
        cell = [int(v) for v in cell]
        if len(cell) < 3:
            raise MeshError(f"cell {K} has fewer than 3 vertices")
        if min(cell) < 0 or max(cell) >= len(vertices):
            raise MeshError(f"cell {K} references a missing vertex")
        p = vertices[cell]
        q = np.roll(p, -1, axis=0)
        if 0.5 * np.sum(p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]) <= 0.0:
            raise MeshError(f"cell {K} is not counter-clockwise or has zero area")
        fids, signs = [], []
        for i, a in enumerate(cell):
            b = cell[(i + 1) % len(cell)]
            if a == b:
                raise MeshError(f"cell {K} repeats vertex {a}")
            key = (min(a, b), max(a, b))
            s = face_index.get(key)
            if s is None:
                s = len(face_vertices)
                face_index[key] = s
                face_vertices.append((a, b))
                face_cells.append([K, -1])
                signs.append(1.0)
            else:
                if face_cells[s][1] >= 0:
                    raise DanglingFace(f"face {key} has more than two incident cells")
                if face_vertices[s] != (b, a):
                    raise DanglingFace(f"face {key} is traversed in the same direction by two cells")
                face_cells[s][1] = K
                signs.append(-1.0)
            fids.append(s)
        cell_faces.append(fids)
        cell_signs.append(signs)

    tags = []
    lookup = {}
    if boundary_tags:
        for key, tag in boundary_tags.items():
            a, b = key
            lookup[(min(a, b), max(a, b))] = Tag.parse(tag)
    default = Tag.parse(default_tag) if default_tag is not None else None
    for s, (a, b) in enumerate(face_vertices):
        if face_cells[s][1] >= 0:
            tags.append(Tag.INTERIOR)
            continue
        tag = lookup.get((min(a, b), max(a, b)))
        if tag is None and tag_rule is not None:
            t = tag_rule(vertices[a], vertices[b])
            tag = Tag.parse(t) if t is not None else None
        if tag is None:
            tag = default
        if tag is None:
            raise UntaggedBoundary(
                f"boundary face {s} from {vertices[a].tolist()} to {vertices[b].tolist()} matches no tag rule"
            )
        if tag is Tag.INTERIOR:
            raise UntaggedBoundary(f"boundary face {s} cannot carry the interior tag")
        tags.append(tag)
    for key in lookup:
        s = face_index.get(key)
        if s is None or face_cells[s][1] >= 0:
            raise MeshError(f"boundary tag given for {key}, which is not a boundary face")

    mesh = PolytopalMesh(
        vertices, cells, face_vertices, face_cells, tags, cell_faces, cell_signs, centres
    )
    for K, d in enumerate(mesh.cell_face_distances):
        i = int(np.argmin(d))
        if d[i] <= 0.0:
            raise NonStarShaped(K, int(mesh.cell_faces[K][i]), float(d[i]))
    return mesh


def regularity_report(mesh: PolytopalMesh) -> RegularityReport:
    """Shape and neighbour regularity factors of the mesh.

    ``theta`` is the sum of the shape and neighbour maxima, which is the
    smallest constant bounding both terms of the regularity assumption.
    """
    shape = 0.0
    varrho = 0.0
    for K, d in enumerate(mesh.cell_face_distances):
        ratio = float(mesh.cell_diameters[K] / d.min())
        varrho = max(varrho, ratio)
        shape = max(shape, ratio + len(d))
    neighbour = 0.0
    for s in mesh.interior_faces:
        K, L = mesh.face_cells[s]
        dK = _distance(mesh, K, s)
        dL = _distance(mesh, L, s)
        neighbour = max(neighbour, dK / dL + dL / dK)
    return RegularityReport(
        theta_shape=shape,
        theta_neighbour=neighbour,
        theta=shape + neighbour,
        varrho=varrho,
        h_mesh=mesh.h_mesh,
    )


def _distance(mesh: PolytopalMesh, K: int, s: int) -> float:
    i = int(np.flatnonzero(mesh.cell_faces[K] == s)[0])
    return float(mesh.cell_face_distances[K][i])


def check_invariants(mesh: PolytopalMesh, domain_area: Optional[float] = None, rtol: float = 1e-12) -> None:
    """Raise MeshError if a geometric identity of the mesh fails."""
    if np.any(mesh.cell_measures <= 0) or np.any(mesh.face_measures <= 0):
        raise MeshError("non-positive cell or face measure")
    for K in range(mesh.n_cells):
        fids = mesh.cell_faces[K]
        n = mesh.cell_normals(K)
        sig = mesh.face_measures[fids]
        hK = mesh.cell_diameters[K]
        closure = np.abs((sig[:, None] * n).sum(axis=0)).max()
        if closure > 1e-12 * max(hK, 1.0) * len(fids):
            raise MeshError(f"cell {K}: sum |sigma| n_K,sigma = {closure:.3e}")
        vol = float((sig * mesh.cell_face_distances[K]).sum())
        if abs(vol - 2.0 * mesh.cell_measures[K]) > rtol * 2.0 * mesh.cell_measures[K] * 10:
            raise MeshError(f"cell {K}: sum |sigma| d_K,sigma != d |K|")
        if hK < mesh.face_measures[fids].max() * (1 - 1e-14):
            raise MeshError(f"cell {K}: diameter below a face diameter")
    for s in mesh.boundary_faces:
        if mesh.face_tags[s] is Tag.INTERIOR:
            raise MeshError(f"boundary face {s} tagged interior")
    if domain_area is not None and not math.isclose(mesh.total_measure, domain_area, rel_tol=1e-10):
        raise MeshError(f"total measure {mesh.total_measure} != domain area {domain_area}")
