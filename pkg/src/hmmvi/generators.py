"""Mesh generators: unit square, Cartesian, triangular, and the dam families.

The dam is the trapezoid with corners (0,0), (7,0), (2,5), (0,5). Dam meshes are
built on the logical square (xi, y) in [0,1] x [0,5] and mapped by
x = xi * (7 - y), which sends xi = 1 onto the slanted face x + y = 7.
"""

from __future__ import annotations

import math
from collections import Counter
import re
from typing import Callable, Optional

import numpy as np

from hmmvi.mesh import PolytopalMesh, Tag, build_mesh

DAM_VERTICES = np.array([[0.0, 0.0], [7.0, 0.0], [2.0, 5.0], [0.0, 5.0]])
DAM_AREA = 22.5
DAM_HEIGHT = 5.0
# Ordinate splitting the slanted face into its Dirichlet and seepage parts.
DAM_SPLIT = 1.0

_TOL = 1e-9


def dam_tag_rule(a, b) -> Optional[Tag]:
    """Boundary tag of the dam face from ``a`` to ``b``, decided by its midpoint."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if abs(a[0]) < _TOL and abs(b[0]) < _TOL:
        return Tag.GAMMA1
    if abs(a[1]) < _TOL and abs(b[1]) < _TOL:
        return Tag.GAMMA2
    if abs(a[1] - DAM_HEIGHT) < _TOL and abs(b[1] - DAM_HEIGHT) < _TOL:
        return Tag.GAMMA3
    if abs(a.sum() - 7.0) < 1e-8 and abs(b.sum() - 7.0) < 1e-8:
        return Tag.GAMMA1 if 0.5 * (a[1] + b[1]) <= DAM_SPLIT + _TOL else Tag.GAMMA3
    return None


def square_tag_rule(left=Tag.DIRICHLET, right=Tag.DIRICHLET, bottom=Tag.DIRICHLET, top=Tag.DIRICHLET,
                    box=((0.0, 1.0), (0.0, 1.0))) -> Callable:
    """Tag rule for an axis-aligned box, one tag per side."""
    (x0, x1), (y0, y1) = box

    def rule(a, b):
        if abs(a[0] - x0) < _TOL and abs(b[0] - x0) < _TOL:
            return left
        if abs(a[0] - x1) < _TOL and abs(b[0] - x1) < _TOL:
            return right
        if abs(a[1] - y0) < _TOL and abs(b[1] - y0) < _TOL:
            return bottom
        if abs(a[1] - y1) < _TOL and abs(b[1] - y1) < _TOL:
            return top
        return None

    return rule


def unit_square(tag=Tag.DIRICHLET, tag_rule: Optional[Callable] = None, centre=None) -> PolytopalMesh:
    """The one-cell mesh of [0,1]^2."""
    verts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
    centres = None if centre is None else [centre]
    return build_mesh(verts, [[0, 1, 2, 3]], tag_rule=tag_rule, default_tag=tag, centres=centres)


def cartesian(nx: int, ny: Optional[int] = None, box=((0.0, 1.0), (0.0, 1.0)),
              tag_rule: Optional[Callable] = None, tag=Tag.DIRICHLET) -> PolytopalMesh:
    """Uniform nx-by-ny rectangle mesh of ``box``."""
    ny = nx if ny is None else ny
    (x0, x1), (y0, y1) = box
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    vid = lambda i, j: i * (ny + 1) + j  # noqa: E731
    cells = [[vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)] for j in range(ny) for i in range(nx)]
    return build_mesh(verts, cells, tag_rule=tag_rule, default_tag=tag)


def triangular(n: int, box=((0.0, 1.0), (0.0, 1.0)), tag_rule: Optional[Callable] = None,
               tag=Tag.DIRICHLET) -> PolytopalMesh:
    """Each square of an n-by-n grid split into two triangles along alternating diagonals."""
    (x0, x1), (y0, y1) = box
    xs = np.linspace(x0, x1, n + 1)
    ys = np.linspace(y0, y1, n + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    vid = lambda i, j: i * (n + 1) + j  # noqa: E731
    cells = []
    for j in range(n):
        for i in range(n):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            if (i + j) % 2 == 0:
                cells += [[a, b, c], [a, c, d]]
            else:
                cells += [[a, b, d], [b, c, d]]
    return build_mesh(verts, cells, tag_rule=tag_rule, default_tag=tag)


def random_convex_cell(rng: np.random.Generator, n_vertices: Optional[int] = None, scale: float = 1.0,
                       tag=Tag.DIRICHLET) -> PolytopalMesh:
    """One-cell mesh on a random convex polygon (3 to 9 vertices)."""
    if n_vertices is None:
        n_vertices = int(rng.integers(3, 10))
    while True:
        ang = np.sort(rng.uniform(0.0, 2.0 * np.pi, n_vertices))
        gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))
        if gaps.max() < np.pi * 0.95 and gaps.min() > 0.05:
            break
    rad = rng.uniform(0.6, 1.0, n_vertices)
    pts = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    # convex hull of the star polygon keeps counter-clockwise order
    from scipy.spatial import ConvexHull

    hull = ConvexHull(pts)
    verts = pts[hull.vertices] * scale + rng.uniform(-2, 2, 2)
    return build_mesh(verts, [list(range(len(verts)))], default_tag=tag)


# ---- dam meshes -----------------------------------------------------------------


def _to_dam(xi, y):
    xi = np.asarray(xi, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.column_stack([xi * (7.0 - y), y])


def _snap_levels(levels: np.ndarray, target: float) -> np.ndarray:
    """Piecewise-linearly remap ``levels`` so that the interior level nearest ``target`` hits it."""
    k = 1 + int(np.argmin(np.abs(levels[1:-1] - target)))
    lo, hi = levels[0], levels[-1]
    out = levels.copy()
    yk = levels[k]
    out[: k + 1] = lo + (levels[: k + 1] - lo) * (target - lo) / (yk - lo)
    out[k:] = target + (levels[k:] - yk) * (hi - target) / (hi - yk)
    return out


def dam_structured(nx: int, ny_below: int, ny_above: int) -> PolytopalMesh:
    """Quadrilateral dam mesh: nx columns, rows split uniformly below and above y = 1."""
    levels = np.concatenate(
        [np.linspace(0.0, DAM_SPLIT, ny_below + 1), np.linspace(DAM_SPLIT, DAM_HEIGHT, ny_above + 1)[1:]]
    )
    xi = np.linspace(0.0, 1.0, nx + 1)
    return _quad_dam(xi, np.tile(levels, (nx + 1, 1)))


def _quad_dam(xi: np.ndarray, y: np.ndarray) -> PolytopalMesh:
    """Quadrilateral dam mesh from column positions ``xi`` and node ordinates ``y[i, j]``."""
    nx, ny = y.shape[0] - 1, y.shape[1] - 1
    XI = np.repeat(xi, ny + 1)
    verts = _to_dam(XI, y.ravel())
    vid = lambda i, j: i * (ny + 1) + j  # noqa: E731
    cells = [[vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)] for j in range(ny) for i in range(nx)]
    return build_mesh(verts, cells, tag_rule=dam_tag_rule)


# Ratio of the top row height to the bottom row height in the hexagonal family.
HEX_GRADING = 1.0
# Vertical zig-zag of hexagon vertices, as a fraction of the adjacent row height.
HEX_ZIGZAG = 0.25


def generate_dam_hexagonal(target_cells: int, grading: float = HEX_GRADING,
                           zigzag: float = HEX_ZIGZAG, split_boundary: bool = True) -> PolytopalMesh:
    """Hexagon-dominant mesh of the dam with n^2 cells, n = round(sqrt(target_cells)).

    Cells are laid out as bricks in n rows of n cells, alternate rows offset by
    half a cell, and the row-boundary vertices are pushed up or down to form
    hexagons. Row heights vary geometrically from bottom to crest by the factor
    ``grading`` (uniform by default), and one row boundary is snapped onto y = 1
    so the slanted face splits exactly. With ``split_boundary`` every boundary
    edge gets a mid-node, as a hexagon cut by the boundary would.
    """
    if target_cells < 1:
        raise ValueError("target_cells must be >= 1")
    n = max(1, int(round(math.sqrt(target_cells))))
    if n == 1:
        verts = [[0.0, 0.0], [7.0, 0.0], [7.0 - DAM_SPLIT, DAM_SPLIT], [2.0, 5.0], [0.0, 5.0]]
        return build_mesh(verts, [[0, 1, 2, 3, 4]], tag_rule=dam_tag_rule)
    r = grading ** (1.0 / (n - 1))
    heights = r ** np.arange(n)
    levels = np.concatenate([[0.0], np.cumsum(heights)]) * DAM_HEIGHT / heights.sum()
    levels[-1] = DAM_HEIGHT
    levels = _snap_levels(levels, DAM_SPLIT)
    row_h = np.diff(levels)

    def breakpoints(j: int) -> list:
        # positions in units of 1 / (2n)
        if j % 2 == 0:
            return [2 * i for i in range(n + 1)]
        shift = 1 if j % 4 == 1 else -1
        return [0] + [2 * i + shift for i in range(1, n)] + [2 * n]

    rows = [breakpoints(j) for j in range(n)]
    vid: dict = {}
    verts: list = []
    for ell in range(n + 1):
        below = set(rows[ell - 1]) if ell >= 1 else set()
        above = set(rows[ell]) if ell < n else set()
        for pos in sorted(below | above):
            dy = 0.0
            if 0 < ell < n and 0 < pos < 2 * n:
                amp = zigzag * min(row_h[ell - 1], row_h[ell])
                dy = amp if pos in above else -amp
            vid[(ell, pos)] = len(verts)
            verts.append((pos / (2.0 * n), levels[ell] + dy))

    level_pos = {ell: sorted(p for (e, p) in vid if e == ell) for ell in range(n + 1)}
    cells = []
    for j in range(n):
        bp = rows[j]
        for xl, xr in zip(bp[:-1], bp[1:]):
            bottom = [p for p in level_pos[j] if xl <= p <= xr]
            top = [p for p in level_pos[j + 1] if xl <= p <= xr]
            cells.append([vid[(j, p)] for p in bottom] + [vid[(j + 1, p)] for p in reversed(top)])
    verts = np.array(verts)
    if split_boundary:
        verts, cells = _split_boundary_edges(verts, cells)
    return build_mesh(_to_dam(verts[:, 0], verts[:, 1]), cells, tag_rule=dam_tag_rule)


def _split_boundary_edges(verts: np.ndarray, cells: list):
    """Insert the midpoint of every edge that belongs to a single cell."""
    count = Counter(frozenset(e) for c in cells for e in zip(c, c[1:] + c[:1]))
    extra, mid = [], {}
    out = []
    for c in cells:
        new = []
        for a, b in zip(c, c[1:] + c[:1]):
            new.append(a)
            key = frozenset((a, b))
            if count[key] == 1:
                if key not in mid:
                    mid[key] = len(verts) + len(extra)
                    extra.append(0.5 * (verts[a] + verts[b]))
                new.append(mid[key])
        out.append(new)
    return np.vstack([verts] + extra) if extra else verts, out


# Kershaw family: level k has n = 17 (k + 2) cells per direction.
KERSHAW_BASE = 17
# Columns over which the row lines jump, as a fraction of the width.
KERSHAW_RAMPS = ((0.2, 0.3), (0.7, 0.8))
# Ordinates (on [0,1]) reached at mid-height by the two row-line families.
KERSHAW_LOW, KERSHAW_HIGH = 0.3, 0.7


def kershaw_size(level: int) -> int:
    if level < 1:
        raise ValueError("Kershaw level must be >= 1")
    return KERSHAW_BASE * (level + 2)


def generate_dam_kershaw(level: int) -> PolytopalMesh:
    """Kershaw-type z-mesh of the dam with n^2 quadrilaterals, n = 17 (level + 2).

    Columns are uniform in the logical coordinate; every row line runs between
    two monotone profiles of the logical height, switching profile across two
    narrow column ramps, which produces strongly sheared cells. The right-hand
    profile is remapped so that a row line hits y = 1 on the slanted face.
    """
    n = kershaw_size(level)
    xi = np.linspace(0.0, 1.0, n + 1)
    eta = np.linspace(0.0, 1.0, n + 1)
    jb = n // 2
    eb = eta[jb]
    prof_a = _snap_levels(np.interp(eta, [0.0, eb, 1.0], [0.0, KERSHAW_LOW, 1.0]), DAM_SPLIT / DAM_HEIGHT)
    prof_b = np.interp(eta, [0.0, eb, 1.0], [0.0, KERSHAW_HIGH, 1.0])
    (r0, r1), (r2, r3) = KERSHAW_RAMPS
    w = np.interp(xi, [0.0, r0, r1, r2, r3, 1.0], [0.0, 0.0, 1.0, 1.0, 0.0, 0.0])
    y = ((1.0 - w)[:, None] * prof_a[None, :] + w[:, None] * prof_b[None, :]) * DAM_HEIGHT
    return _quad_dam(xi, y)


_SPEC = re.compile(r"^\s*([a-z\-]+)\s*(?::\s*([0-9,x ]+))?\s*$")


def from_spec(spec: str) -> PolytopalMesh:
    """Build a mesh from a generator string such as ``dam-hex:441`` or ``cartesian:8``."""
    m = _SPEC.match(spec.lower())
    if not m:
        raise ValueError(f"malformed generator spec {spec!r}")
    name, arg = m.group(1), m.group(2)
    try:
        if name == "dam-hex":
            return generate_dam_hexagonal(int(arg or 441))
        if name == "dam-kershaw":
            return generate_dam_kershaw(int(arg or 1))
        if name == "dam-quad":
            nx, nb, na = (int(a) for a in (arg or "4,1,4").split(","))
            return dam_structured(nx, nb, na)
        if name == "cartesian":
            return cartesian(int(arg or 8))
        if name == "triangular":
            return triangular(int(arg or 8))
        if name == "unit-square":
            return unit_square()
    except ValueError as exc:
        raise ValueError(f"bad argument in generator spec {spec!r}: {exc}") from None
    raise ValueError(f"unknown generator {name!r} in {spec!r}")


GENERATORS = ("dam-hex", "dam-kershaw", "dam-quad", "cartesian", "triangular", "unit-square")


def is_generator_spec(text: str) -> bool:
    m = _SPEC.match(text.lower())
    return bool(m) and m.group(1) in GENERATORS
