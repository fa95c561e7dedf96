"""Reading and writing meshes, run artifacts and legacy VTK files.

All floats are written with ``repr``, the shortest decimal that reads back to the
same double, so files round-trip bit for bit.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from hmmvi.gdm import DiscreteVector
from hmmvi.mesh import MeshError, PolytopalMesh, Tag, build_mesh

SCHEMA_VERSION = 1
VTK_POLYGON = 7


class ParseError(ValueError):
    """Malformed input file; the message names the line or field at fault."""


class IOFailure(OSError):
    pass


# ---- mesh files ---------------------------------------------------------------------


def _num(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot serialise non-finite value {x!r}")
    return repr(x)


def _list(values) -> str:
    return "[" + ", ".join(values) + "]"


def mesh_to_text(mesh: PolytopalMesh) -> str:
    """The mesh as JSON text, one vertex, cell or tag per line."""
    lines = ["{", f'  "dimension": {mesh.dimension},', '  "vertices": [']
    verts = [f"    {_list(_num(c) for c in v)}" for v in mesh.vertices]
    lines.append(",\n".join(verts))
    lines += ["  ],", '  "cells": [']
    lines.append(",\n".join(f"    {_list(str(int(i)) for i in c)}" for c in mesh.cell_vertices))
    lines += ["  ],", '  "cell_centres": [']
    lines.append(",\n".join(f"    {_list(_num(c) for c in x)}" for x in mesh.cell_centres))
    lines += ["  ],", '  "boundary_tags": {']
    tags = []
    for s in mesh.boundary_faces:
        a, b = sorted(int(v) for v in mesh.face_vertices[s])
        tags.append(f'    "{a}-{b}": "{mesh.face_tags[s].value}"')
    lines.append(",\n".join(tags))
    lines += ["  }", "}", ""]
    return "\n".join(lines)


def _reject_constant(name: str):
    raise ValueError(f"non-finite number {name}")


def _loads(text: str, source: str):
    try:
        return json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    except ValueError as exc:
        raise ParseError(f"{source}: {exc}") from None


def _field(doc: Mapping, key: str, source: str):
    if not isinstance(doc, dict) or key not in doc:
        raise ParseError(f"{source}: missing field {key!r}")
    return doc[key]


def _points(value, key: str, source: str) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ParseError(f"{source}: field {key!r} must be a list of [x, y] pairs") from None
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ParseError(f"{source}: field {key!r} must be a list of [x, y] pairs")
    bad = np.flatnonzero(~np.isfinite(arr).all(axis=1))
    if len(bad):
        raise ParseError(f"{source}: field {key!r}, entry {bad[0]}: non-finite coordinate")
    return arr


def mesh_from_text(text: str, source: str = "<mesh>") -> PolytopalMesh:
    doc = _loads(text, source)
    dim = _field(doc, "dimension", source)
    if dim != 2:
        raise ParseError(f"{source}: field 'dimension': only 2 is supported, got {dim!r}")
    vertices = _points(_field(doc, "vertices", source), "vertices", source)
    cells = _field(doc, "cells", source)
    if not isinstance(cells, list) or not all(isinstance(c, list) and all(isinstance(i, int) for i in c) for c in cells):
        raise ParseError(f"{source}: field 'cells' must be a list of vertex-index lists")
    raw_tags = _field(doc, "boundary_tags", source)
    if not isinstance(raw_tags, dict):
        raise ParseError(f"{source}: field 'boundary_tags' must map 'i-j' keys to tag names")
    tags = {}
    for key, name in raw_tags.items():
        try:
            a, b = (int(t) for t in key.split("-"))
        except ValueError:
            raise ParseError(f"{source}: field 'boundary_tags': bad face key {key!r}") from None
        try:
            tags[(a, b)] = Tag.parse(name)
        except ValueError:
            raise ParseError(f"{source}: field 'boundary_tags', face {key}: unknown tag {name!r}") from None
    centres = None
    if "cell_centres" in doc:
        centres = _points(doc["cell_centres"], "cell_centres", source)
        if len(centres) != len(cells):
            raise ParseError(f"{source}: field 'cell_centres' has {len(centres)} entries for {len(cells)} cells")
    try:
        return build_mesh(vertices, cells, boundary_tags=tags, centres=centres)
    except MeshError as exc:
        raise ParseError(f"{source}: {exc}") from None


def write_mesh(mesh: PolytopalMesh, path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(mesh_to_text(mesh))
    except OSError as exc:
        raise IOFailure(f"cannot write mesh to {path}: {exc}") from exc


def read_mesh(path) -> PolytopalMesh:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IOFailure(f"cannot read mesh from {path}: {exc}") from exc
    return mesh_from_text(text, str(path))


def mesh_hash(mesh: PolytopalMesh) -> str:
    return hashlib.sha256(mesh_to_text(mesh).encode()).hexdigest()


# ---- VTK ----------------------------------------------------------------------------


def vtk_text(mesh: PolytopalMesh, cell_fields: Mapping[str, np.ndarray], title: str = "hmmvi") -> str:
    """Legacy ASCII unstructured grid with polygon cells and cell data.

    Scalar fields have one value per cell, vector fields an (n_cells, 2) array.
    """
    n = mesh.n_cells
    checked = {}
    for name, values in cell_fields.items():
        arr = np.asarray(values, dtype=float)
        if arr.shape not in ((n,), (n, 2)):
            raise ValueError(f"field {name!r} has shape {arr.shape}, expected ({n},) or ({n}, 2)")
        if " " in name:
            raise ValueError(f"field name {name!r} contains a space")
        checked[name] = arr
    out = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII", "DATASET UNSTRUCTURED_GRID"]
    out.append(f"POINTS {mesh.n_vertices} double")
    out += [f"{_num(x)} {_num(y)} 0.0" for x, y in mesh.vertices]
    size = sum(len(c) + 1 for c in mesh.cell_vertices)
    out.append(f"CELLS {n} {size}")
    out += [" ".join([str(len(c))] + [str(int(i)) for i in c]) for c in mesh.cell_vertices]
    out.append(f"CELL_TYPES {n}")
    out += [str(VTK_POLYGON)] * n
    if checked:
        out.append(f"CELL_DATA {n}")
    for name, arr in checked.items():
        if arr.ndim == 1:
            out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            out += [_num(v) for v in arr]
        else:
            out.append(f"VECTORS {name} double")
            out += [f"{_num(a)} {_num(b)} 0.0" for a, b in arr]
    return "\n".join(out) + "\n"


def write_vtk(mesh: PolytopalMesh, cell_fields: Mapping[str, np.ndarray], path, title: str = "hmmvi") -> None:
    text = vtk_text(mesh, cell_fields, title)
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(text)
    except OSError as exc:
        raise IOFailure(f"cannot write VTK file {path}: {exc}") from exc


# ---- run artifacts ------------------------------------------------------------------


def _tool_version() -> str:
    from hmmvi import __version__

    return __version__


def provenance() -> dict:
    return {"tool": "hmmvi", "version": _tool_version(),
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}


@dataclass
class RunArtifact:
    """Everything needed to reproduce and audit a run."""

    config: dict
    mesh_sha256: str
    solution: Optional[dict] = None
    report: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def create(cls, config: dict, mesh: PolytopalMesh, solution: Optional[DiscreteVector] = None,
               report: Optional[dict] = None) -> "RunArtifact":
        sol = None
        if solution is not None:
            sol = {"cell_values": [float(v) for v in solution.cell_values],
                   "face_values": [float(v) for v in solution.face_values]}
        return cls(dict(config), mesh_hash(mesh), sol, dict(report or {}), provenance())

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "config": self.config,
            "mesh_sha256": self.mesh_sha256,
            "solution": self.solution,
            "report": self.report,
            "provenance": self.provenance,
        }

    def to_text(self) -> str:
        try:
            return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=False) + "\n"
        except ValueError as exc:
            raise ValueError(f"artifact holds a non-finite number: {exc}") from None

    @classmethod
    def from_text(cls, text: str, source: str = "<artifact>") -> "RunArtifact":
        doc = _loads(text, source)
        version = _field(doc, "schema_version", source)
        if version != SCHEMA_VERSION:
            raise ParseError(f"{source}: field 'schema_version': unsupported version {version!r}")
        return cls(
            config=_field(doc, "config", source),
            mesh_sha256=_field(doc, "mesh_sha256", source),
            solution=_field(doc, "solution", source),
            report=_field(doc, "report", source),
            provenance=_field(doc, "provenance", source),
            schema_version=version,
        )

    def solution_vector(self, mesh: PolytopalMesh) -> DiscreteVector:
        if self.solution is None:
            raise ValueError("artifact carries no solution")
        if mesh_hash(mesh) != self.mesh_sha256:
            raise ValueError("mesh does not match the artifact's mesh hash")
        return DiscreteVector(np.array(self.solution["cell_values"]), np.array(self.solution["face_values"]))

    def write(self, path) -> None:
        text = self.to_text()
        try:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        except OSError as exc:
            raise IOFailure(f"cannot write artifact {path}: {exc}") from exc

    @classmethod
    def read(cls, path) -> "RunArtifact":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise IOFailure(f"cannot read artifact {path}: {exc}") from exc
        return cls.from_text(text, os.fspath(path))
