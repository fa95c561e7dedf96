import itertools
import math

import numpy as np
import pytest
from scipy.optimize import bisect

from hmmvi.bench import binding_obstacle_problem, bulkley_problem, dam_head, dam_problem
from hmmvi.gdm import DiscreteVector, HmmDiscretisation
from hmmvi.generators import cartesian, dam_structured, generate_dam_hexagonal, random_convex_cell, square_tag_rule, unit_square
from hmmvi.mesh import Tag
from hmmvi.operators import HeavisideParams, p_laplacian, seepage_operator
from hmmvi.solvers import (
    ActiveSetState,
    InfeasibleConstraintSet,
    IterationCapExceeded,
    MaxOuterExceeded,
    OBSTACLE,
    SIGNORINI,
    SolverOptions,
    VIProblem,
    assemble_fluxes,
    signorini_kkt,
    solve,
    solve_bulkley,
    solve_kacanov,
    solve_linear_vi,
    solve_newton_vi,
    solve_obstacle,
)

TOY_DAMS = [(1, 1, 1), (2, 1, 1), (1, 1, 2), (2, 1, 2), (3, 1, 1), (1, 1, 3), (2, 2, 2)]
RIGHT_TOP = square_tag_rule(Tag.GAMMA1, Tag.GAMMA3, Tag.GAMMA2, Tag.GAMMA3)


def _dense_solve(S, b, fixed, values):
    """Plain dense solve with prescribed entries, independent of the solver's condensation."""
    S = S.toarray()
    n = len(b)
    x = np.zeros(n)
    x[fixed] = values
    free = np.setdiff1d(np.arange(n), fixed)
    x[free] = np.linalg.solve(S[np.ix_(free, free)], b[free] - S[np.ix_(free, fixed)] @ values)
    return x


def brute_force_signorini(problem, w, tol=1e-10):
    """Try every active set; keep those whose solution satisfies all sign conditions."""
    mesh = problem.mesh
    nc = mesh.n_cells
    S = assemble_fluxes(problem.disc, problem.operator, w).matrix
    b = np.zeros(problem.disc.n_dofs)
    b[:nc] = mesh.cell_measures * problem.cell_source
    faces = problem.constrained_faces
    hits = []
    for mask in itertools.product([False, True], repeat=len(faces)):
        mask = np.array(mask, dtype=bool)
        fixed = np.concatenate([nc + problem.fixed_faces, nc + faces[mask]])
        vals = np.concatenate([problem.fixed_values, problem.face_barrier[mask]])
        x = _dense_solve(S, b, fixed, vals)
        outflow = -(S @ x)[nc + faces] / mesh.face_measures[faces]
        scale = 1 + np.abs(outflow).max()
        ok_a = np.all(outflow[mask] >= -tol * scale)
        ok_b = np.all(x[nc + faces[~mask]] <= problem.face_barrier[~mask] + tol)
        if ok_a and ok_b:
            hits.append((mask, x))
    return hits


def _frozen_iterate(problem):
    # a non-trivial coefficient: freeze at the unconstrained solution shifted down
    x = _dense_solve(problem.disc.stiffness(), np.zeros(problem.disc.n_dofs),
                     problem.mesh.n_cells + problem.fixed_faces, problem.fixed_values)
    return DiscreteVector.from_array(problem.mesh, x - 0.5)


def _toy_problems():
    for shape in TOY_DAMS:
        yield f"dam{shape}", dam_problem(dam_structured(*shape))
    for n in (1, 2):
        disc = HmmDiscretisation(cartesian(n, tag_rule=RIGHT_TOP))
        for f in (0.0, 8.0):
            yield f"square{n}-f{f}", VIProblem(disc, seepage_operator(), SIGNORINI, source=f,
                                              dirichlet=lambda x: 0.8 + 0.1 * x[:, 1], barrier=0.6)


@pytest.mark.parametrize("name, problem", list(_toy_problems()), ids=lambda v: v if isinstance(v, str) else "")
def test_active_set_matches_brute_force(name, problem):
    assert len(problem.constrained_faces) <= 4
    w = _frozen_iterate(problem)
    u, state = solve_linear_vi(problem, w)
    hits = brute_force_signorini(problem, w)
    assert len(hits) >= 1
    exact = [h for h in hits if np.array_equal(h[0], state.active)]
    assert exact, f"solver set {state.active} not among oracle sets {[h[0] for h in hits]}"
    assert np.abs(exact[0][1] - u.array).max() <= 1e-10 * (1 + np.abs(u.array).max())
    # every admissible set gives the same solution
    for _, x in hits:
        assert np.abs(x - u.array).max() <= 1e-9 * (1 + np.abs(u.array).max())
    assert state.iterations <= len(problem.constrained_faces) + 1


def test_brute_force_has_binding_cases():
    binding = [p for _, p in _toy_problems() if solve_linear_vi(p, _frozen_iterate(p))[1].active.any()]
    free = [p for _, p in _toy_problems() if not solve_linear_vi(p, _frozen_iterate(p))[1].active.all()]
    assert binding and free


def test_high_barrier_is_plain_solve():
    mesh = dam_structured(3, 2, 4)
    problem = dam_problem(mesh)
    high = VIProblem(problem.disc, problem.operator, SIGNORINI, dirichlet=dam_head, barrier=1e6)
    u, state = solve_linear_vi(high)
    assert not state.active.any()
    S = assemble_fluxes(high.disc, high.operator).matrix
    x = _dense_solve(S, np.zeros(high.disc.n_dofs), mesh.n_cells + high.fixed_faces, high.fixed_values)
    np.testing.assert_allclose(u.array, x, atol=1e-10)


def test_constant_solution():
    mesh = cartesian(3, tag_rule=RIGHT_TOP)
    disc = HmmDiscretisation(mesh)
    problem = VIProblem(disc, seepage_operator(), SIGNORINI, dirichlet=0.7, barrier=0.7)
    u, state = solve_linear_vi(problem, DiscreteVector.constant(mesh, 0.7))
    np.testing.assert_allclose(u.array, 0.7, rtol=1e-12)
    assert state.iterations == 1
    F = assemble_fluxes(disc, problem.operator).fluxes(u)
    assert np.abs(F).max() < 1e-12


def test_state_mismatch_rejected():
    problem = dam_problem(dam_structured(1, 1, 1))
    with pytest.raises(ValueError):
        solve_linear_vi(problem, state=ActiveSetState.all_active([0]))


def test_iteration_cap_detected():
    problem = dam_problem(dam_structured(2, 1, 2))
    with pytest.raises(IterationCapExceeded):
        # a negative tolerance makes every face flip at every step
        solve_linear_vi(problem, options=SolverOptions(set_tol=-1.0))


# ---- fluxes ---------------------------------------------------------------------------


def test_affine_fluxes_are_normal_derivatives():
    c = np.array([0.3, -1.1])
    for mesh in (unit_square(), random_convex_cell(np.random.default_rng(4), 7), cartesian(3)):
        disc = HmmDiscretisation(mesh)
        fl = assemble_fluxes(disc, p_laplacian(2.0))
        u = DiscreteVector(mesh.cell_centres @ c, mesh.face_centres @ c)
        F = fl.fluxes(u)
        for D in range(disc.n_diamonds):
            K, s = disc.diamond_cell[D], disc.diamond_face[D]
            n = mesh.face_normals[s] * (1 if mesh.face_cells[s, 0] == K else -1)
            assert F[D] == pytest.approx(-c @ n, abs=1e-12)


def test_constant_has_zero_flux():
    mesh = generate_dam_hexagonal(16)
    disc = HmmDiscretisation(mesh)
    fl = assemble_fluxes(disc, seepage_operator(), DiscreteVector.constant(mesh, 2.0))
    assert np.abs(fl.fluxes(DiscreteVector.constant(mesh, -3.0))).max() < 1e-12


def test_local_conservativity_identity():
    rng = np.random.default_rng(9)
    mesh = generate_dam_hexagonal(16)
    disc = HmmDiscretisation(mesh)
    w = DiscreteVector.from_array(mesh, rng.uniform(0, 5, disc.n_dofs))
    fl = assemble_fluxes(disc, seepage_operator(HeavisideParams(0.1, 0.5)), w)
    for _ in range(5):
        u, v = rng.normal(size=(2, disc.n_dofs))
        F = fl.fluxes(u)
        sig = mesh.face_measures[disc.diamond_face]
        lhs = (sig * F * (v[disc.diamond_cell] - v[mesh.n_cells + disc.diamond_face])).sum()
        assert lhs == pytest.approx(fl.bilinear(u, v), rel=1e-12, abs=1e-12)
    dofs, M = fl.cell_flux_map(3)
    np.testing.assert_allclose(M @ u[dofs], F[disc.diamond_cell == 3], rtol=1e-12, atol=1e-12)


def test_signorini_kkt_on_toy_dam():
    problem = dam_problem(dam_structured(3, 2, 4))
    u, _ = solve_linear_vi(problem)
    kkt = signorini_kkt(problem, u, assemble_fluxes(problem.disc, problem.operator))
    assert kkt["complementarity_min"] >= -1e-8
    assert kkt["complementarity_product"] <= 1e-8
    for key in ("cell_balance", "flux_continuity", "natural_flux", "global_balance"):
        assert kkt[key] <= 1e-10


# ---- fixed-point loop -------------------------------------------------------------------


def test_linear_operator_converges_after_one_repeat():
    mesh = dam_structured(3, 2, 4)
    base = dam_problem(mesh)
    problem = VIProblem(base.disc, p_laplacian(2.0), SIGNORINI, dirichlet=dam_head)
    rep = solve_kacanov(problem)
    assert rep.outer_iterations == 2
    assert rep.residual_history[-1] < 1e-12
    u, _ = solve_linear_vi(problem)
    np.testing.assert_allclose(rep.solution.array, u.array, atol=1e-12)


def test_kacanov_small_dam_records_history():
    rep = solve_kacanov(dam_problem(dam_structured(6, 3, 6)))
    assert rep.converged
    assert len(rep.residual_history) == rep.outer_iterations == len(rep.inner_iterations)
    assert rep.residual_history[-1] <= 1e-2
    assert rep.kkt["complementarity_min"] >= -1e-8
    s = rep.summary()
    assert s["model"] == SIGNORINI and s["outer_iterations"] == rep.outer_iterations


def test_max_outer_exceeded_carries_report():
    with pytest.raises(MaxOuterExceeded) as err:
        solve_kacanov(dam_problem(dam_structured(6, 3, 6)), SolverOptions(max_outer=1))
    assert err.value.report is not None and not err.value.report.converged


def test_relaxation_can_be_disabled():
    rep = solve_kacanov(dam_problem(dam_structured(6, 3, 6)), SolverOptions(relaxation=False))
    assert rep.relaxation_events == []


@pytest.mark.parametrize("kwargs", [{"delta": 0.0}, {"relax_factor": 0.0}, {"relax_factor": 1.5}, {"max_outer": 0}])
def test_bad_options(kwargs):
    with pytest.raises(ValueError):
        SolverOptions(**kwargs)


# ---- obstacle ----------------------------------------------------------------------------


def brute_force_obstacle(problem, tol=1e-10):
    mesh = problem.mesh
    nc = mesh.n_cells
    S = problem.disc.stiffness()
    b = np.zeros(problem.disc.n_dofs)
    b[:nc] = mesh.cell_measures * problem.cell_source
    psi = problem.cell_barrier
    hits = []
    for mask in itertools.product([False, True], repeat=nc):
        mask = np.array(mask, dtype=bool)
        fixed = np.concatenate([nc + problem.fixed_faces, np.flatnonzero(mask)])
        vals = np.concatenate([problem.fixed_values, psi[mask]])
        x = _dense_solve(S, b, fixed, vals)
        mult = (b - S @ x)[:nc]
        if np.all(mult[mask] >= -tol * np.abs(b).sum()) and np.all(x[:nc][~mask] <= psi[~mask] + tol):
            hits.append((mask, x))
    return hits


def test_obstacle_matches_brute_force():
    problem = binding_obstacle_problem(3)
    rep = solve_obstacle(problem)
    hits = brute_force_obstacle(problem)
    assert len(hits) == 1
    mask, x = hits[0]
    assert mask.sum() == 1 and mask[4]  # only the centre binds
    np.testing.assert_array_equal(np.isin(np.arange(9), rep.state.A), mask)
    np.testing.assert_allclose(rep.solution.array, x, atol=1e-10)
    assert rep.kkt["obstacle_gap_min"] >= -1e-12 and rep.kkt["multiplier_min"] >= -1e-12


def test_obstacle_infinite_is_plain_solve():
    free = binding_obstacle_problem(3, obstacle=math.inf)
    rep = solve_obstacle(free)
    S = free.disc.stiffness()
    b = np.zeros(free.disc.n_dofs)
    b[:9] = free.mesh.cell_measures * 20.0
    x = _dense_solve(S, b, 9 + free.fixed_faces, free.fixed_values)
    np.testing.assert_allclose(rep.solution.array, x, atol=1e-10)


def test_one_cell_obstacle_by_hand():
    disc = HmmDiscretisation(unit_square())
    # S_KK = sum_D |D| |2 sqrt2 n|^2 = 8, so the free value is f / 8 = 0.125
    free = solve_obstacle(VIProblem(disc, p_laplacian(2.0), OBSTACLE, source=1.0, barrier=math.inf))
    assert free.solution.cell_values[0] == pytest.approx(0.125, rel=1e-13)
    rep = solve_obstacle(VIProblem(disc, p_laplacian(2.0), OBSTACLE, source=1.0, barrier=0.05))
    assert rep.solution.cell_values[0] == pytest.approx(0.05, rel=1e-14)
    # multiplier |K| f - 8 u = 0.6 > 0
    mult = 1.0 - (disc.stiffness() @ rep.solution.array)[0]
    assert mult == pytest.approx(0.6, rel=1e-13)
    assert rep.state.active.tolist() == [True]
    assert rep.kkt["complementarity_product"] < 1e-12


def test_obstacle_below_dirichlet_is_infeasible():
    disc = HmmDiscretisation(cartesian(2))
    with pytest.raises(InfeasibleConstraintSet):
        VIProblem(disc, p_laplacian(2.0), OBSTACLE, dirichlet=1.0, barrier=0.5)
    with pytest.raises(InfeasibleConstraintSet):
        VIProblem(disc, p_laplacian(2.0), OBSTACLE, barrier=np.array([0.0, np.nan, 0.0, 0.0]))
    with pytest.raises(InfeasibleConstraintSet):
        VIProblem(HmmDiscretisation(cartesian(2, tag_rule=RIGHT_TOP)), seepage_operator(), SIGNORINI,
                  barrier=-np.inf)


def test_unknown_model():
    with pytest.raises(ValueError):
        VIProblem(HmmDiscretisation(cartesian(2)), p_laplacian(2.0), "plastic")


# ---- Newton path ------------------------------------------------------------------------


def test_newton_p2_matches_linear():
    problem = dam_problem(dam_structured(3, 2, 4))
    linear = VIProblem(problem.disc, p_laplacian(2.0), SIGNORINI, dirichlet=dam_head)
    u, state = solve_linear_vi(linear)
    rep = solve_newton_vi(linear)
    np.testing.assert_allclose(rep.solution.array, u.array, atol=1e-10)
    np.testing.assert_array_equal(rep.state.active, state.active)


def _one_cell_residual(disc, op, u, f):
    e = np.zeros(disc.n_dofs)
    e[0] = 1.0
    x = u * e
    g = disc.gradient(x)
    a = op(np.zeros((len(g), 2)), np.zeros(len(g)), g)
    return float((disc.diamond_measure * (a * disc.gradient(e)).sum(axis=1)).sum()) - f


def test_newton_p3_single_cell_bisection():
    disc = HmmDiscretisation(unit_square(), p=3.0)
    op = p_laplacian(3.0)
    rep = solve(VIProblem(disc, op, OBSTACLE, source=1.0, dirichlet=0.0))
    root = bisect(lambda u: _one_cell_residual(disc, op, u, 1.0), 0.0, 10.0, xtol=1e-15)
    assert rep.solution.cell_values[0] == pytest.approx(root, rel=1e-10)
    assert root == pytest.approx((16 * math.sqrt(2)) ** -0.5, rel=1e-12)


def test_newton_obstacle_p3():
    disc = HmmDiscretisation(cartesian(4), p=3.0)
    rep = solve_obstacle(VIProblem(disc, p_laplacian(3.0), OBSTACLE, source=20.0, barrier=0.3))
    assert rep.state.active.any()
    assert rep.solution.cell_values.max() <= 0.3 + 1e-12
    assert rep.kkt["multiplier_min"] >= -1e-10 and rep.kkt["residual"] < 1e-9


# ---- yield-stress model --------------------------------------------------------------------


def test_bulkley_zero_source():
    rep = solve_bulkley(bulkley_problem(source=0.0))
    assert np.abs(rep.solution.array).max() == 0.0


def test_bulkley_without_yield_is_linear():
    problem = bulkley_problem(n=6, yield_coefficient=0.0)
    rep = solve_bulkley(problem)
    b = np.zeros(problem.disc.n_dofs)
    b[:36] = problem.mesh.cell_measures * 1.0
    x = _dense_solve(problem.disc.stiffness(), b, 36 + problem.fixed_faces, problem.fixed_values)
    np.testing.assert_allclose(rep.solution.array, x, atol=1e-8)


def test_bulkley_rigid_regime():
    problem = bulkley_problem(n=6, source=0.1, yield_coefficient=5.0)
    rep = solve_bulkley(problem)
    grad = problem.disc.gradient(rep.solution)
    l1 = float((problem.disc.diamond_measure * np.linalg.norm(grad, axis=1)).sum())
    assert l1 < 10 * rep.kkt["eta_final"]


def test_bulkley_variational_inequality():
    rep = solve_bulkley(bulkley_problem(n=8))
    assert abs(rep.kkt["probe_zero"]) < 1e-3
    assert abs(rep.kkt["probe_double"]) < 1e-3
    assert rep.kkt["eta_final"] == pytest.approx(1e-5)


def test_bulkley_rejects_bad_data():
    disc = HmmDiscretisation(cartesian(2))
    with pytest.raises(ValueError):
        VIProblem(disc, p_laplacian(2.0), "bulkley", dirichlet=1.0)
    with pytest.raises(ValueError):
        VIProblem(HmmDiscretisation(cartesian(2, tag_rule=RIGHT_TOP)), p_laplacian(2.0), "bulkley")
    with pytest.raises(ValueError):
        VIProblem(disc, p_laplacian(2.0), "bulkley", yield_coefficient=-1.0)
