import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from condrecon.errors import InvalidProblemError
from condrecon.forward import (
    NoiseModel, PointSource, ProblemSpec, assemble, forward_map, observe,
    partial_stiffness, solve, synthesize_data,
)
from condrecon.mesh import build_rect_grid, structured_trimesh
from condrecon.optsmooth import make_setting

from oracles import slab_profile


def sides(p):
    return np.isclose(p[:, 0], 0) | np.isclose(p[:, 0], 1)


def top_bottom(p):
    return np.isclose(p[:, 1], 0) | np.isclose(p[:, 1], 1)


def two_layer(dom, k0=1.0, k1=0.1):
    return np.where(dom.points[:, 1] < 0.5, np.log(k0), np.log(k1))


@pytest.fixture(scope="module")
def layered():
    g = build_rect_grid(50, 50)
    spec = ProblemSpec(g, dirichlet=sides, source=PointSource(0.5, 0.6),
                       noise=NoiseModel(0.01, 7))
    return g, spec, two_layer(g)


def test_zero_data_zero_solution():
    g = build_rect_grid(10, 10)
    spec = ProblemSpec(g, dirichlet=sides)
    assert not solve(assemble(np.zeros(g.size), spec)).any()


@pytest.mark.parametrize("dom", [build_rect_grid(9, 7), structured_trimesh(6, 5)],
                         ids=["ccfd", "fem"])
def test_linear_dirichlet_is_reproduced(dom):
    spec = ProblemSpec(dom, g_dirichlet=lambda p: p[:, 0])
    u = solve(assemble(np.zeros(dom.size), spec))
    np.testing.assert_allclose(u, dom.points[:, 0], atol=1e-10)


def test_slab_matches_series_resistor():
    g = build_rect_grid(8, 40)
    spec = ProblemSpec(g, dirichlet=top_bottom, g_dirichlet=lambda p: np.where(p[:, 1] > 0.5, 1.0, 0.0))
    u = solve(assemble(two_layer(g, 1.0, 0.1), spec))
    exact = slab_profile(g.points[:, 1], 1.0, 0.1, 0.0, 1.0)
    np.testing.assert_allclose(u, exact, atol=1e-8)


def test_point_source_solution_shape(layered):
    g, spec, q = layered
    u = solve(assemble(q, spec))
    assert np.isfinite(u).all() and (u > 0).all()
    peak = g.points[np.argmax(u)]
    assert np.hypot(*(peak - [0.5, 0.6])) < 0.05
    row = u.reshape(50, 50)[30]
    assert row[0] < row[12] < row[24] and row[-1] < row[-13] < row[25]


def test_point_source_on_corner_is_shared():
    g = build_rect_grid(50, 50)
    w = ProblemSpec(g, dirichlet=sides, source=PointSource(0.5, 0.6)).discretization.source
    nz = np.flatnonzero(w)
    assert len(nz) == 4 and w.sum() == pytest.approx(1.0)
    assert set(zip(*g.unravel(nz))) == {(24, 29), (25, 29), (24, 30), (25, 30)}


def test_pure_neumann_rejected():
    g = build_rect_grid(4, 4)
    with pytest.raises(InvalidProblemError):
        ProblemSpec(g, dirichlet=lambda p: np.zeros(len(p), bool)).discretization


def test_source_outside_domain():
    g = build_rect_grid(4, 4)
    with pytest.raises(InvalidProblemError):
        ProblemSpec(g, dirichlet=sides, source=PointSource(2.0, 0.5)).discretization


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_stiffness_symmetric_positive_definite(seed):
    q = np.random.default_rng(seed).normal(size=36)
    for dom in (build_rect_grid(6, 6), structured_trimesh(5, 5)):
        spec = ProblemSpec(dom, dirichlet=sides)
        A = assemble(q[:dom.size], spec).A
        assert abs(A - A.T).max() <= 1e-14 * abs(A).max()
        assert np.linalg.eigvalsh(A.toarray()).min() > 0


def test_flux_conservation():
    g = build_rect_grid(20, 20)
    spec = ProblemSpec(g, dirichlet=sides, g_dirichlet=lambda p: p[:, 0] ** 2)
    q = np.random.default_rng(0).normal(size=g.size)
    system = assemble(q, spec)
    disc = spec.discretization
    u_ext = system.extend(system.solve_free(system.rhs))
    boundary_flux = (system.full @ u_ext)[disc.fixed]
    assert abs(boundary_flux.sum()) < 1e-10


def test_observe_full_mask(layered):
    g, spec, q = layered
    u = solve(assemble(q, spec))
    assert np.array_equal(observe(u, spec).values, u)


def test_observe_masks():
    g = build_rect_grid(2, 2)
    u = np.array([1.0, 2.0, 3.0, 4.0])
    half = ProblemSpec(g, dirichlet=sides, observed=[2, 0])
    z = observe(u, half)
    assert len(z) == 2
    rng = np.random.default_rng(1)
    g8 = build_rect_grid(8, 8)
    idx = rng.choice(g8.size, 11, replace=False)
    u8 = rng.normal(size=g8.size)
    assert np.array_equal(observe(u8, ProblemSpec(g8, dirichlet=sides, observed=idx)).values, u8[idx])


def test_observe_rejects_bad_indices():
    g = build_rect_grid(3, 3)
    with pytest.raises(InvalidProblemError):
        ProblemSpec(g, dirichlet=sides, observed=[0, 9]).discretization


def test_noise_free_data_is_clean(layered):
    g, _, q = layered
    spec = ProblemSpec(g, dirichlet=sides, source=PointSource(0.5, 0.6), noise=NoiseModel(0.0, 1))
    assert np.array_equal(synthesize_data(q, spec).values, forward_map(q, spec))


def test_noise_level_and_determinism(layered):
    g, spec, q = layered
    clean = forward_map(q, spec)
    z1, z2 = synthesize_data(q, spec), synthesize_data(q, spec)
    assert np.array_equal(z1.values, z2.values)
    ratio = np.linalg.norm(z1.values - clean) / np.linalg.norm(clean)
    assert 0.007 <= ratio <= 0.013
    assert z1.provenance["seed"] == 7 and z1.provenance["nsr"] == 0.01


def test_single_forward_path(layered):
    g, spec, q = layered
    a = observe(solve(assemble(q, spec)), spec).values
    assert np.array_equal(a, forward_map(q, spec))
    assert np.array_equal(a, make_setting(spec).forward(q))


@pytest.mark.parametrize("dom", [build_rect_grid(6, 5), structured_trimesh(4, 4)], ids=["ccfd", "fem"])
def test_partial_stiffness_first_order(dom):
    spec = ProblemSpec(dom, dirichlet=sides)
    rng = np.random.default_rng(2)
    q = rng.normal(size=dom.size)
    j = dom.size // 2
    dA = partial_stiffness(q, j, spec).toarray()
    A0 = assemble(q, spec).A.toarray()
    errs = []
    for eps in (1e-5, 1e-6):
        qe = q.copy()
        qe[j] += eps
        errs.append(np.linalg.norm((assemble(qe, spec).A.toarray() - A0) / eps - dA))
    assert errs[1] < 0.2 * errs[0]


def test_partial_stiffness_locality_and_symmetry():
    g = build_rect_grid(7, 7)
    spec = ProblemSpec(g, dirichlet=sides)
    j = int(g.index(3, 3))
    dA = partial_stiffness(np.zeros(g.size), j, spec)
    rows, cols = dA.nonzero()
    nbrs = {j, j - 1, j + 1, j - 7, j + 7}
    assert set(rows) <= nbrs and set(cols) <= nbrs
    assert abs(dA - dA.T).max() == 0


def test_partial_stiffness_index_check():
    g = build_rect_grid(3, 3)
    with pytest.raises(IndexError):
        partial_stiffness(np.zeros(9), 9, ProblemSpec(g, dirichlet=sides))


def test_assemble_rejects_bad_q():
    g = build_rect_grid(3, 3)
    spec = ProblemSpec(g, dirichlet=sides)
    with pytest.raises(ValueError):
        assemble(np.zeros(8), spec)
    with pytest.raises(InvalidProblemError):
        assemble(np.full(9, np.nan), spec)
    assert sp.issparse(assemble(np.zeros(9), spec).A)
