import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hmmvi.gdm import (
    DiscreteVector,
    HmmDiscretisation,
    QuadratureFailure,
    discrete_seminorm,
    face_averages,
    inscribed_ball_weights,
    interpolate_boundary,
    interpolate_full,
    interpolate_pointwise,
    reconstruct_function,
    reconstruct_gradient,
    reconstruct_trace,
)
from hmmvi.generators import cartesian, dam_structured, generate_dam_hexagonal, random_convex_cell, unit_square
from hmmvi.mesh import Tag, regularity_report
from hmmvi.quadrature import gauss_segment

from conftest import rel_err


def _face_at(mesh, point):
    return int(np.argmin(np.linalg.norm(mesh.face_centres - np.asarray(point), axis=1)))


def _diamond_of(disc, face):
    return int(np.flatnonzero(disc.diamond_face == face)[0])


# ---- discrete vectors ------------------------------------------------------------------


def test_vector_shapes_and_algebra():
    m = cartesian(2)
    v = DiscreteVector.constant(m, 2.0)
    w = DiscreteVector.from_array(m, np.arange(m.n_cells + m.n_faces, dtype=float))
    assert v.conforms(m) and w.conforms(m)
    assert np.array_equal((v + w).array, 2.0 + w.array)
    assert np.array_equal((w - v).array, w.array - 2.0)
    assert np.array_equal((w * 3.0).array, 3.0 * w.array)
    assert w.max_norm() == m.n_cells + m.n_faces - 1


def test_nonfinite_vector_does_not_conform():
    m = unit_square()
    v = DiscreteVector(np.array([np.nan]), np.zeros(4))
    assert not v.conforms(m)
    with pytest.raises(ValueError):
        reconstruct_gradient(HmmDiscretisation(m), v)


def test_vector_length_mismatch():
    with pytest.raises(ValueError):
        DiscreteVector.from_array(cartesian(2), np.zeros(3))


# ---- reconstructions -----------------------------------------------------------------


def test_function_reconstruction():
    m = cartesian(3)
    disc = HmmDiscretisation(m)
    assert np.all(reconstruct_function(disc, DiscreteVector.constant(m, 4.0)) == 4.0)
    one = HmmDiscretisation(unit_square())
    v = DiscreteVector(np.array([3.0]), np.zeros(4))
    assert reconstruct_function(one, v)[0] == 3.0
    px = interpolate_pointwise(one, lambda x: np.atleast_2d(x)[:, 0])
    assert reconstruct_function(one, px)[0] == 0.5


def test_trace_reconstruction():
    m = unit_square()
    disc = HmmDiscretisation(m)
    assert np.all(reconstruct_trace(disc, DiscreteVector.constant(m, -1.0)) == -1.0)
    v = DiscreteVector(np.zeros(1), np.array([1.0, 2.0, 3.0, 4.0]))
    assert np.array_equal(reconstruct_trace(disc, v), v.face_values[m.boundary_faces])
    g = interpolate_boundary(disc, lambda x: np.atleast_2d(x)[:, 0], part=Tag.DIRICHLET)
    assert g.face_values[_face_at(m, [0.5, 0.0])] == pytest.approx(0.5, abs=1e-15)


def test_gradient_of_constant_is_zero():
    m = generate_dam_hexagonal(16)
    disc = HmmDiscretisation(m)
    assert np.abs(reconstruct_gradient(disc, DiscreteVector.constant(m, 7.0))).max() < 1e-12


def test_gradient_unit_square_left_face_by_hand():
    m = unit_square()
    disc = HmmDiscretisation(m)
    left = _face_at(m, [0.0, 0.5])
    v = DiscreteVector.zeros(m)
    v.face_values[left] = 1.0
    g = reconstruct_gradient(disc, v)
    r2 = math.sqrt(2.0)
    expected = {
        (0.0, 0.5): (-1.0 - r2, 0.0),
        (1.0, 0.5): (-1.0 + r2, 0.0),
        (0.5, 0.0): (-1.0, 0.0),
        (0.5, 1.0): (-1.0, 0.0),
    }
    for point, value in expected.items():
        np.testing.assert_allclose(g[_diamond_of(disc, _face_at(m, point))], value, atol=1e-14)
    np.testing.assert_allclose(disc.cell_gradient(v)[0], [-1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(sorted(disc.residual_map(v)[0]), [0.0, 0.0, 0.5, 0.5], atol=1e-15)


@pytest.mark.parametrize("name", ["cartesian4", "triangular3", "dam_quad", "hex16", "rect"])
def test_affine_exactness_on_meshes(small_meshes, name):
    m = small_meshes[name]
    disc = HmmDiscretisation(m)
    c = np.array([0.7, -1.3])
    v = interpolate_pointwise(disc, lambda x: np.atleast_2d(x) @ c + 0.4)
    g = reconstruct_gradient(disc, v)
    assert rel_err(g, np.broadcast_to(c, g.shape)) < 1e-12
    assert max(np.abs(r).max() for r in disc.residual_map(v)) < 1e-12


@given(st.integers(0, 100_000), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_affine_exactness_random_cells(seed, a, b, c0):
    m = random_convex_cell(np.random.default_rng(seed))
    disc = HmmDiscretisation(m)
    c = np.array([a, b])
    v = interpolate_pointwise(disc, lambda x: np.atleast_2d(x) @ c + c0)
    g = reconstruct_gradient(disc, v)
    assert np.abs(g - c).max() <= 1e-12 * max(1.0, np.abs(c).max()) * 10


@given(st.integers(0, 10_000))
def test_reconstructions_are_linear(seed):
    rng = np.random.default_rng(seed)
    m = cartesian(3)
    disc = HmmDiscretisation(m)
    n = m.n_cells + m.n_faces
    u, w = DiscreteVector.from_array(m, rng.normal(size=n)), DiscreteVector.from_array(m, rng.normal(size=n))
    a, b = rng.normal(size=2)
    lhs = reconstruct_gradient(disc, u * a + w * b)
    rhs = a * reconstruct_gradient(disc, u) + b * reconstruct_gradient(disc, w)
    assert np.abs(lhs - rhs).max() <= 1e-12 * (1 + np.abs(rhs).max())
    f1 = interpolate_full(disc, lambda x: np.sin(x[:, 0]) * a + np.cos(x[:, 1]) * b)
    f2 = interpolate_full(disc, lambda x: np.sin(x[:, 0])) * a + interpolate_full(disc, lambda x: np.cos(x[:, 1])) * b
    assert np.abs(f1.array - f2.array).max() < 1e-12


@pytest.mark.parametrize("scale", [1.0, 1.5])
def test_stabilisation_bound(small_meshes, scale):
    """A scaled identity on the residuals satisfies the two-sided bound with the mesh's theta."""
    rng = np.random.default_rng(3)
    for m in small_meshes.values():
        disc = HmmDiscretisation(m, stabilisation=scale)
        theta = regularity_report(m).theta
        for g in disc.groups:
            mu = rng.normal(size=(len(g.cells), g.n))
            x = np.concatenate([np.zeros((len(g.cells), 1)), mu], axis=1)
            r = np.einsum("mnj,mj->mn", g.residual, x)
            dmeas = g.sigma * g.dist / 2
            base = (dmeas * (r / g.dist) ** 2).sum(axis=1)
            mid = (dmeas * (disc.stabilisation * r / g.dist) ** 2).sum(axis=1)
            assert np.all(base / theta <= mid * (1 + 1e-14))
            assert np.all(mid <= theta * base * (1 + 1e-14))


def test_bad_discretisation_parameters():
    with pytest.raises(ValueError):
        HmmDiscretisation(unit_square(), p=1.0)
    with pytest.raises(ValueError):
        HmmDiscretisation(unit_square(), stabilisation=0.0)


# ---- stiffness -------------------------------------------------------------------------


def test_stiffness_symmetric_and_kills_constants(small_meshes):
    for m in small_meshes.values():
        S = HmmDiscretisation(m).stiffness().toarray()
        assert np.abs(S - S.T).max() < 1e-12 * np.abs(S).max()
        assert np.abs(S.sum(axis=1)).max() < 1e-12 * np.abs(S).max()
        assert np.linalg.eigvalsh(S).min() > -1e-10


def test_stiffness_matches_gradient_form():
    m = generate_dam_hexagonal(16)
    disc = HmmDiscretisation(m)
    rng = np.random.default_rng(0)
    u, v = rng.normal(size=(2, disc.n_dofs))
    gu, gv = disc.gradient(u), disc.gradient(v)
    direct = float((disc.diamond_measure * (gu * gv).sum(axis=1)).sum())
    assert float(v @ (disc.stiffness() @ u)) == pytest.approx(direct, rel=1e-12)


# ---- interpolants ----------------------------------------------------------------------


def test_boundary_interpolant_constant_and_linear():
    m = cartesian(1, box=((0.0, 1.0), (1.0, 3.0)))
    disc = HmmDiscretisation(m)
    v = interpolate_boundary(disc, lambda x: np.full(len(x), 5.0), part=Tag.DIRICHLET)
    np.testing.assert_allclose(v.face_values[m.boundary_faces], 5.0, rtol=1e-14)
    assert np.all(v.cell_values == 0.0)
    w = interpolate_boundary(disc, lambda x: np.atleast_2d(x)[:, 1], part=Tag.DIRICHLET)
    assert w.face_values[_face_at(m, [0.0, 2.0])] == pytest.approx(2.0, rel=1e-15)


def test_boundary_interpolant_dam_data():
    from hmmvi.bench import dam_head

    m = dam_structured(3, 2, 4)
    disc = HmmDiscretisation(m)
    v = interpolate_boundary(disc, dam_head, part=Tag.GAMMA1)
    g1 = m.faces_with_tag(Tag.GAMMA1)
    upstream = g1[m.face_centres[g1, 0] == 0.0]
    downstream = g1[m.face_centres[g1, 0] > 5.0]
    np.testing.assert_allclose(v.face_values[upstream], 5.0, rtol=1e-14)
    np.testing.assert_allclose(v.face_values[downstream], 1.0, rtol=1e-14)
    others = np.setdiff1d(np.arange(m.n_faces), g1)
    assert np.all(v.face_values[others] == 0.0)


def test_boundary_interpolant_quadrature_failure():
    disc = HmmDiscretisation(cartesian(2))
    with pytest.raises(QuadratureFailure):
        interpolate_boundary(disc, lambda x: np.full(len(x), np.nan), part=Tag.DIRICHLET)
    with pytest.raises(QuadratureFailure):
        face_averages(disc.mesh, lambda x: np.where(x[:, 0] > 0.5, np.inf, 0.0))


def test_full_interpolant_constant_and_affine(small_meshes):
    for m in small_meshes.values():
        disc = HmmDiscretisation(m)
        v = interpolate_full(disc, lambda x: np.full(len(x), 2.5))
        np.testing.assert_allclose(v.array, 2.5, rtol=1e-13)
        c = np.array([1.5, -0.25])
        a = interpolate_full(disc, lambda x: x @ c + 1.0)
        np.testing.assert_allclose(a.cell_values, m.cell_centres @ c + 1.0, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(a.face_values, m.face_centres @ c + 1.0, rtol=1e-12, atol=1e-12)


def test_full_interpolant_quadrature_failure():
    disc = HmmDiscretisation(cartesian(2))
    with pytest.raises(QuadratureFailure):
        interpolate_full(disc, lambda x: np.where(x[:, 1] > 0.5, np.nan, x[:, 0]))


def test_weight_identities(small_meshes):
    for m in small_meshes.values():
        w = inscribed_ball_weights(m)
        for K in range(m.n_cells):
            total, first = w.moments(K)
            assert total == pytest.approx(m.cell_measures[K], rel=1e-10)
            np.testing.assert_allclose(first, m.cell_measures[K] * m.cell_centres[K], rtol=1e-10, atol=1e-12)
        assert np.all(w.magnitudes >= 0) and np.all(w.magnitudes <= w.bound)


def test_weight_ball_inside_cell(small_meshes):
    for m in small_meshes.values():
        w = inscribed_ball_weights(m)
        for K in range(m.n_cells):
            assert w.radii[K] <= m.cell_face_distances[K].min() * (1 + 1e-14)


def test_weight_evaluate_zero_outside():
    m = cartesian(2)
    w = inscribed_ball_weights(m)
    assert w.evaluate(0, [[0.9, 0.9]])[0] == 0.0
    assert w.evaluate(0, [m.cell_centres[0]])[0] == w.magnitudes[0]


# ---- semi-norm -------------------------------------------------------------------------


def test_seminorm_constant_is_zero():
    m = cartesian(3)
    assert discrete_seminorm(HmmDiscretisation(m), DiscreteVector.constant(m, 3.0)) == 0.0


def test_seminorm_unit_square_by_hand():
    m = unit_square()
    disc = HmmDiscretisation(m)
    v = DiscreteVector(np.zeros(1), np.ones(4))
    # 4 faces of |sigma| = 1, d = 0.5, jump 1: sum 1 * 0.5 * (1 / 0.5)^2 = 8
    assert discrete_seminorm(disc, v, 2.0) == pytest.approx(math.sqrt(8.0), rel=1e-15)


def test_seminorm_rejects_p():
    with pytest.raises(ValueError):
        discrete_seminorm(HmmDiscretisation(unit_square()), DiscreteVector.zeros(unit_square()), 1.0)


def test_gradient_bounded_by_seminorm():
    """The ratio of the gradient norm to the semi-norm stays bounded under refinement."""
    rng = np.random.default_rng(1)
    worst = []
    for n in (4, 8, 16):
        m = cartesian(n)
        disc = HmmDiscretisation(m)
        ratios = []
        for _ in range(30):
            v = DiscreteVector.from_array(m, rng.normal(size=disc.n_dofs))
            ratios.append(disc.norm_gradient(v) / discrete_seminorm(disc, v))
        worst.append(max(ratios))
    assert max(worst) < 2.0 * min(worst)
    assert max(worst) < 10.0


def boundary_l2(mesh, faces, phi, n=8):
    t, w = gauss_segment(n)
    a = mesh.vertices[mesh.face_vertices[faces, 0]]
    b = mesh.vertices[mesh.face_vertices[faces, 1]]
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    vals = phi(pts.reshape(-1, 2)).reshape(len(faces), n)
    return math.sqrt(float((mesh.face_measures[faces] * (vals**2 @ w)).sum()))


def test_interpolant_stability_theta(small_meshes):
    """||Pi P phi|| <= theta^2 ||phi|| on random trigonometric phi."""
    rng = np.random.default_rng(5)
    for m in small_meshes.values():
        disc = HmmDiscretisation(m)
        theta = regularity_report(m).theta
        for _ in range(10):
            k = rng.normal(size=(3, 2)) * 3
            a = rng.normal(size=3)
            phi = lambda x, k=k, a=a: (a * np.sin(x @ k.T + 0.3)).sum(axis=1)  # noqa: E731
            lhs = disc.norm_function(interpolate_full(disc, phi), 2.0)
            rhs = math.sqrt(disc.integrate(lambda x: phi(x) ** 2))
            assert lhs <= theta**2 * rhs
            # face averages never exceed the boundary norm of the trace
            bnd = m.boundary_faces
            tr = disc.norm_trace(interpolate_full(disc, phi), 2.0)
            assert tr <= boundary_l2(m, bnd, phi) * (1 + 1e-12)
