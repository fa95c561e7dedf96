"""Hybrid mimetic mixed gradient schemes for non-linear variational inequalities.

The package builds polytopal meshes, the HMM gradient discretisation on them,
Leray-Lions operators, and solvers for Signorini (seepage), obstacle and
Bulkley problems.
"""

from hmmvi.mesh import (
    Cell,
    Face,
    MeshError,
    PolytopalMesh,
    RegularityReport,
    Tag,
    build_mesh,
    regularity_report,
)
from hmmvi.gdm import DiscreteVector, HmmDiscretisation
from hmmvi.operators import HeavisideParams, OperatorSpec, heaviside, p_laplacian, seepage_operator
from hmmvi.solvers import (
    ActiveSetState,
    SolveReport,
    SolverOptions,
    VIProblem,
    solve_bulkley,
    solve_kacanov,
    solve_linear_vi,
    solve_newton_vi,
    solve_obstacle,
)

__version__ = "0.1.0"

__all__ = [
    "ActiveSetState",
    "Cell",
    "DiscreteVector",
    "Face",
    "HeavisideParams",
    "HmmDiscretisation",
    "MeshError",
    "OperatorSpec",
    "PolytopalMesh",
    "RegularityReport",
    "SolveReport",
    "SolverOptions",
    "Tag",
    "VIProblem",
    "build_mesh",
    "heaviside",
    "p_laplacian",
    "regularity_report",
    "seepage_operator",
    "solve_bulkley",
    "solve_kacanov",
    "solve_linear_vi",
    "solve_newton_vi",
    "solve_obstacle",
]
