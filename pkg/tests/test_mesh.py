import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condrecon.errors import InvalidGeometryError, MeshFormatError, MeshingError
from condrecon.mesh import (
    approximate_signed_distance, build_rect_grid, combine_sdf, div_fd, dump_trimesh,
    fd_gradient_matrix, grad_ags, grad_fd, grad_pce, load_trimesh, make_trimesh,
    sdf_disc, sdf_halfplane, sdf_rectangle, structured_trimesh, total_variation,
    triangle_quality, triangulate,
)

UNIT_SQUARE = "trimesh 4 2\n0 0\n1 0\n1 1\n0 1\n0 1 2\n0 2 3\n"


@pytest.fixture(scope="module")
def disc_mesh():
    return triangulate(sdf_disc((0, 0), 1.0), 0.1, (-1, 1, -1, 1))


# -- rectangular grids --------------------------------------------------------


def test_grid_50x50():
    g = build_rect_grid(50, 50, (0, 1, 0, 1))
    assert g.size == 2500
    assert g.hx == pytest.approx(0.02) and g.hy == pytest.approx(0.02)


def test_grid_2x2_centres():
    g = build_rect_grid(2, 2)
    np.testing.assert_allclose(g.points, [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])


def test_grid_spacing_anisotropic():
    g = build_rect_grid(3, 2, (0, 3, 0, 1))
    assert (g.hx, g.hy) == (1.0, 0.5)


@pytest.mark.parametrize("args", [(1, 5), (5, 1), (2.5, 3)])
def test_grid_rejects_small_or_fractional_counts(args):
    with pytest.raises(InvalidGeometryError):
        build_rect_grid(*args)


def test_grid_rejects_degenerate_extents():
    with pytest.raises(InvalidGeometryError):
        build_rect_grid(4, 4, (0, 0, 0, 1))


@given(st.integers(2, 30), st.integers(2, 30))
def test_grid_index_bijection(nx, ny):
    g = build_rect_grid(nx, ny)
    k = np.arange(g.size)
    i, j = g.unravel(k)
    assert np.array_equal(g.index(i, j), k)
    assert i.min() == 0 and i.max() == nx - 1 and j.max() == ny - 1


# -- mesh file format ---------------------------------------------------------


def test_load_unit_square():
    m = load_trimesh(UNIT_SQUARE)
    np.testing.assert_allclose(m.areas, [0.5, 0.5])
    assert m.boundary.all()


def test_load_zero_area_triangle():
    src = "trimesh 4 2\n0 0\n1 0\n2 0\n0 1\n0 1 3\n0 1 2\n"
    with pytest.raises(MeshFormatError, match="zero-area"):
        load_trimesh(src)


def test_load_out_of_range_index():
    src = "trimesh 3 1\n0 0\n1 0\n0 1\n0 1 7\n"
    with pytest.raises(MeshFormatError) as exc:
        load_trimesh(src)
    assert exc.value.line == 5


@pytest.mark.parametrize("src", [
    "",
    "mesh 3 1\n0 0\n1 0\n0 1\n0 1 2\n",
    "trimesh 3 1\n0 0\n1 0\n",
    "trimesh 3 1\n0 0\n1 x\n0 1\n0 1 2\n",
    "trimesh 3 1\n0 0\n1 0\n0 1\n0 1 2\nboundary 0 1\n",
    "trimesh 3 1\n0 0\n1 0\n0 1\n0 1 2\nextra\n",
])
def test_load_malformed(src):
    with pytest.raises(MeshFormatError):
        load_trimesh(src)


def test_orientation_is_normalised():
    m = make_trimesh([[0, 0], [1, 0], [0, 1]], [[0, 2, 1]])
    p = m.nodes[m.triangles[0]]
    cross = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0])
    assert cross > 0


def test_dump_load_round_trip(disc_mesh):
    again = load_trimesh(dump_trimesh(disc_mesh))
    assert np.array_equal(again.nodes, disc_mesh.nodes)
    assert np.array_equal(again.triangles, disc_mesh.triangles)
    assert np.array_equal(again.boundary, disc_mesh.boundary)


def test_stars_and_boundary_flags():
    m = structured_trimesh(4, 3)
    for p in range(m.size):
        expected = np.flatnonzero((m.triangles == p).any(axis=1))
        assert np.array_equal(np.sort(m.star(p)), expected)
    on_edge = np.isclose(m.nodes, [0, 0]).any(axis=1) | np.isclose(m.nodes, [1, 1]).any(axis=1)
    assert np.array_equal(m.boundary, on_edge)


def test_lumped_weights_sum_to_area():
    m = structured_trimesh(5, 7, (0, 2, 0, 3))
    assert m.weights.sum() == pytest.approx(6.0)


# -- signed distance ----------------------------------------------------------


def _circle_sdf(n):
    return approximate_signed_distance(lambda t: (np.cos(t), np.sin(t)),
                                       lambda p: np.hypot(p[:, 0], p[:, 1]) < 1,
                                       n_samples=n, interval=(0, 2 * np.pi), parametric=True)


def test_sampled_circle_centre_and_outside():
    d = _circle_sdf(10000)
    assert d([[0, 0]])[0] == pytest.approx(-1, abs=1e-3)
    assert d([[2, 0]])[0] == pytest.approx(1, abs=1e-3)


def test_sampled_distance_zero_at_sample():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
    d = approximate_signed_distance(pts, lambda p: np.zeros(len(p), bool))
    assert d([[1.0, 0.0]])[0] == 0.0


def test_sampled_distance_converges():
    # the worst case sits on the curve, halfway between samples, so the
    # query set is a dense ring on the circle itself
    t = np.linspace(0, 2 * np.pi, 200001)
    q = np.column_stack([np.cos(t), np.sin(t)])
    exact = np.hypot(q[:, 0], q[:, 1]) - 1
    errs = [np.abs(_circle_sdf(n)(q) - exact).max() for n in (500, 1000, 2000, 4000)]
    for a, b in zip(errs, errs[1:]):
        assert b <= 0.5 * a


def test_combinators_on_known_points():
    a = sdf_disc((0, 0), 1.0)
    u = combine_sdf("union", a, a)
    pts = np.random.default_rng(2).uniform(-2, 2, (500, 2))
    assert np.array_equal(u(pts) < 0, a(pts) < 0)
    ann = combine_sdf("difference", a, sdf_disc((0, 0), 0.4))
    assert ann([[0.7, 0]])[0] == pytest.approx(-0.3)


def test_crown_intersection_membership():
    upper = approximate_signed_distance(np.cos, lambda p: p[:, 1] <= np.cos(p[:, 0]),
                                        interval=(-9, 9))
    quart = lambda x: 5 * (2 * x / (5 * np.pi)) ** 4 - 5  # noqa: E731
    lower = approximate_signed_distance(quart, lambda p: p[:, 1] >= quart(p[:, 0]),
                                        interval=(-9, 9))
    assert combine_sdf("intersection", upper, lower)([[0, 0.5]])[0] < 0


def test_combinators_randomised_membership():
    rng = np.random.default_rng(3)
    p = rng.uniform(-1.5, 1.5, (2000, 2))
    r = np.hypot(p[:, 0], p[:, 1])
    disc, hole = sdf_disc((0, 0), 1.0), sdf_disc((0, 0), 0.4)
    half = sdf_halfplane((0, 1), 0.2)
    cases = {
        ("difference", disc, hole): (r < 1) & (r > 0.4),
        ("intersection", disc, half): (r < 1) & (p[:, 1] < 0.2),
        ("union", hole, half): (r < 0.4) | (p[:, 1] < 0.2),
    }
    for (op, a, b), truth in cases.items():
        assert np.array_equal(combine_sdf(op, a, b)(p) < 0, truth)


def test_rectangle_sdf_exact():
    d = sdf_rectangle((0, 2, 0, 1))
    np.testing.assert_allclose(d([[1, 0.5], [3, 0.5], [3, 2]]), [-0.5, 1.0, np.sqrt(2)])


def test_unknown_combinator():
    with pytest.raises(ValueError):
        combine_sdf("xor", sdf_disc(), sdf_disc())


# -- triangulator ---------------------------------------------------------------


def test_triangulate_disc_quality(disc_mesh):
    assert np.hypot(*disc_mesh.nodes.T).max() <= 1 + 1e-3
    assert triangle_quality(disc_mesh).min() >= 0.3


def test_triangulate_square_node_count():
    h = 0.1
    m = triangulate(sdf_rectangle((0, 1, 0, 1)), h, (0, 1, 0, 1),
                    fixed_points=[[0, 0], [1, 0], [0, 1], [1, 1]])
    estimate = 1.0 / (np.sqrt(3) / 4 * h ** 2)
    assert estimate / 2 <= m.size <= 2 * estimate


def test_triangulate_empty_interior():
    far = sdf_disc((10, 10), 0.5)
    with pytest.raises(MeshingError):
        triangulate(far, 0.1, (0, 1, 0, 1))


# -- gradients -------------------------------------------------------------------


@pytest.mark.parametrize("coef", [(1.0, 0.0, 0.0), (3.0, 2.0, -7.0)])
def test_pce_and_ags_linear_reproduction(disc_mesh, coef):
    a, b, c = coef
    q = a * disc_mesh.nodes[:, 0] + b * disc_mesh.nodes[:, 1] + c
    np.testing.assert_allclose(grad_pce(disc_mesh, q), np.tile([a, b], (disc_mesh.n_triangles, 1)), atol=1e-11)
    np.testing.assert_allclose(grad_ags(disc_mesh, q), np.tile([a, b], (disc_mesh.size, 1)), atol=1e-11)


def test_pce_quadratic_first_order():
    errs = []
    for n in (8, 16, 32):
        m = structured_trimesh(n, n)
        g = grad_pce(m, m.nodes[:, 0] ** 2)
        errs.append(np.abs(g[:, 0] - 2 * m.centroids[:, 0]).max())
    assert errs[1] < 0.6 * errs[0] and errs[2] < 0.6 * errs[1]


def test_ags_equal_areas_is_plain_mean():
    m = structured_trimesh(2, 2)
    centre = int(np.flatnonzero(np.all(np.isclose(m.nodes, 0.5), axis=1))[0])
    q = np.random.default_rng(4).normal(size=m.size)
    pce = grad_pce(m, q)
    np.testing.assert_allclose(grad_ags(m, q)[centre], pce[m.star(centre)].mean(axis=0), atol=1e-14)


def test_ags_is_convex_combination_of_star(disc_mesh):
    q = np.sin(3 * disc_mesh.nodes[:, 0]) * disc_mesh.nodes[:, 1]
    pce, ags = grad_pce(disc_mesh, q), grad_ags(disc_mesh, q)
    for p in range(0, disc_mesh.size, 37):
        star = pce[disc_mesh.star(p)]
        assert (ags[p] >= star.min(axis=0) - 1e-12).all() and (ags[p] <= star.max(axis=0) + 1e-12).all()


def test_ags_sine_refinement():
    errs = []
    for h in (0.2, 0.1, 0.05):
        m = triangulate(sdf_disc((0, 0), 1.0), h, (-1, 1, -1, 1))
        g = grad_ags(m, np.sin(np.pi * m.nodes[:, 0]))
        errs.append(np.abs(g[:, 0] - np.pi * np.cos(np.pi * m.nodes[:, 0])).max())
    assert errs[0] > errs[1] > errs[2]


def test_fd_constant_field():
    g = build_rect_grid(6, 5)
    assert not grad_fd(g, np.full(g.size, 2.5)).any()


@settings(max_examples=25)
@given(st.integers(0, 2 ** 31))
def test_fd_adjointness(seed):
    g = build_rect_grid(8, 8, (0, 1, 0, 2))
    rng = np.random.default_rng(seed)
    q, v = rng.normal(size=g.size), rng.normal(size=(g.size, 2))
    assert abs(np.sum(grad_fd(g, q) * v) + q @ div_fd(g, v)) < 1e-12 * max(1, np.abs(v).sum() / g.hy)


def test_fd_matrix_matches_function():
    g = build_rect_grid(7, 4, (0, 1, 0, 3))
    q = np.random.default_rng(5).normal(size=g.size)
    D = fd_gradient_matrix(g)
    np.testing.assert_allclose((D @ q).reshape(2, -1).T, grad_fd(g, q), atol=1e-12)


def test_step_anisotropic_tv_equals_jump_times_length():
    g = build_rect_grid(50, 50)
    q = np.where(g.points[:, 1] < 0.5, 0.0, np.log(0.1))
    tv = total_variation(grad_fd(g, q), g.weights, "anisotropic")
    assert tv == pytest.approx(-np.log(0.1), rel=1e-12)
