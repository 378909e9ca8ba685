import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from models import curved_patch, flat_plate, quarter_cylinder
from shellopt.errors import EmbeddingError, InfeasibleConstraintError, SingularFitError
from shellopt.geometry import (
    FfdSpec,
    LeastSquaresFit,
    build_extraction,
    build_ffd_matrix,
    embed_points,
    ffd_constraints,
    fit_control_points,
    lagrange_nodes,
    make_ffd_block,
    reduce_ffd_design,
)
from shellopt.intersections import EDGE, DIFFERENTIABLE, compute_intersections, infer_end_pins
from shellopt.splines import KnotVector, NurbsSurface, eval_surface, eval_surface_points, eval_volume, greville_points


# --- Lagrange extraction ------------------------------------------------------


def test_node_counts():
    assert lagrange_nodes(flat_plate(p=1, nel=(1, 1)))[0].shape == (4, 2)
    nodes, conn = lagrange_nodes(flat_plate(p=2, nel=(1, 1)))
    assert nodes.shape == (9, 2)
    assert set(np.round(nodes[:, 0], 12)) == {0.0, 0.5, 1.0}
    nodes, conn = lagrange_nodes(flat_plate(p=2, nel=(2, 1)))
    # 2 x 3 columns minus the shared one, times 3 rows
    assert nodes.shape == ((3 + 3 - 1) * 3, 2)
    assert conn.shape == (2, 9)
    # the shared column is referenced by both elements
    assert len(set(conn[0]) & set(conn[1])) == 3


def test_node_ordering_is_element_first():
    nodes, conn = lagrange_nodes(flat_plate(p=1, nel=(2, 2)))
    assert np.array_equal(conn[0], [0, 1, 2, 3])
    assert np.allclose(nodes[:4], [[0, 0], [0, 0.5], [0.5, 0], [0.5, 0.5]])


@pytest.mark.parametrize("seed", [0, 1])
def test_extraction_reproduces_surface(seed):
    s = curved_patch(seed=seed, p=3, q=2, nel=(3, 2))
    nodes, _ = lagrange_nodes(s)
    M = build_extraction(s, nodes)
    assert M.shape == (len(nodes), s.ncp)
    assert np.allclose(M.sum(axis=1), 1.0, atol=1e-14)
    assert np.allclose(M @ s.flat_points(), eval_surface_points(s, nodes), atol=1e-12)


def test_fit_round_trip_and_null_space():
    s = curved_patch(seed=2, p=3, q=2, nel=(3, 2))
    M = build_extraction(s)
    P = s.flat_points()
    assert np.allclose(fit_control_points(M, M @ P), P, atol=1e-10)
    # perturbation orthogonal to range(M) leaves the fit unchanged
    rng = np.random.default_rng(0)
    Md = M.toarray()
    Q, _ = np.linalg.qr(Md, mode="complete")
    null = Q[:, Md.shape[1]:] @ rng.standard_normal((Md.shape[0] - Md.shape[1], 3))
    assert np.allclose(fit_control_points(M, M @ P + null), P, atol=1e-10)


def test_rank_deficient_fit():
    s = flat_plate(p=2, nel=(2, 2))
    M = build_extraction(s, np.array([[0.5, 0.5]] * 3))
    with pytest.raises(SingularFitError):
        LeastSquaresFit(M)


# --- FFD ----------------------------------------------------------------------


def test_unit_block_and_embedding():
    b = make_ffd_block((1, 1, 1), 1, [[0, 1], [0, 1], [0, 1]])
    assert b.shape == (2, 2, 2)
    assert np.allclose(embed_points(b, [[0, 0, 0], [1, 1, 1], [0.5, 0.5, 0.5]]),
                       [[0, 0, 0], [1, 1, 1], [0.5, 0.5, 0.5]])
    A = build_ffd_matrix(b, [[0.5, 0.5, 0.5]]).toarray()
    assert np.allclose(A, 0.125)
    with pytest.raises(EmbeddingError):
        embed_points(b, [[1.5, 0.2, 0.2]])
    with pytest.raises(ValueError):
        make_ffd_block((1, 1, 1), 1, [[0, 0], [0, 1], [0, 1]])


def test_arch_block_shape_and_identity():
    b = make_ffd_block((4, 1, 1), 2, [[0, 10], [0, 3], [0, 6]])
    assert b.shape == (6, 3, 3)
    for a, kv in enumerate(b.kvs):
        assert kv.degree == 2
    g = [greville_points(kv) for kv in b.kvs]
    assert np.allclose(eval_volume(b, [g[0][2], g[1][1], g[2][2]])[0], b.control_points[2, 1, 2])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_embedding_round_trip(seed):
    rng = np.random.default_rng(seed)
    bounds = np.array([[-1, 2], [0, 3], [1, 1.5]])
    b = make_ffd_block((3, 2, 1), 2, bounds)
    X = bounds[:, 0] + rng.random((100, 3)) * (bounds[:, 1] - bounds[:, 0])
    A = build_ffd_matrix(b, embed_points(b, X))
    assert np.allclose(A.sum(axis=1), 1.0)
    assert np.allclose(A @ b.flat_points(), X, atol=1e-12)


def test_ffd_reproduces_fitted_patch():
    s = curved_patch(seed=3, p=3, q=2, nel=(3, 2))
    nodes, _ = lagrange_nodes(s)
    M = build_extraction(s, nodes)
    PL = M @ s.flat_points()
    b = make_ffd_block((2, 2, 2), 2, np.c_[PL.min(0) - 0.1, PL.max(0) + 0.1])
    A = build_ffd_matrix(b, embed_points(b, PL))
    P = fit_control_points(M, A @ b.flat_points())
    assert np.allclose(P, s.flat_points(), atol=1e-10)


def test_align_pin_rows_and_reduction():
    b = make_ffd_block((4, 1, 1), 2, [[0, 10], [0, 3], [0, 6]])
    spec = FfdSpec(fields=(2,), align=(1,), pins=((2, (0,), 1, (0,)),), regu=True)
    Aeq, beq, Ain, bin_ = ffd_constraints(b, spec)
    n0, n1, n2 = b.shape
    n_align = n0 * n2 * (n1 - 1)
    assert Aeq.shape[0] == n_align + n0
    # regu rows along z
    assert Ain.shape[0] == n0 * n1 * (n2 - 1)
    z0 = b.flat_points()[:, 2]
    assert np.allclose(Aeq @ z0, beq)
    assert np.all(Ain @ z0 - bin_ > 0)
    (fm,), G, g = reduce_ffd_design(b, spec)
    # 18 aligned lines, 6 of them pinned
    assert fm.T.shape == (54, 12)
    assert np.allclose(fm.T @ fm.x0 + fm.c, z0)
    assert np.all(G @ fm.x0 + g > 0)
    # aligned copies collapse to one row per (x-index, z-gap)
    assert G.shape[0] == n0 * (n2 - 1)


def test_contradictory_pins():
    b = make_ffd_block((1, 1, 1), 1, [[0, 1], [0, 1], [0, 1]])
    spec = FfdSpec(fields=(2,), align=(2,), pins=((2, (0,), None, ()), (2, (1,), None, ())))
    with pytest.raises(InfeasibleConstraintError):
        reduce_ffd_design(b, spec)


# --- intersections ------------------------------------------------------------


def vertical_plate(x=0.5, z0=-0.5, z1=0.5, p=2, nel=(2, 2)):
    ku, kv = KnotVector.uniform(p, nel[0]), KnotVector.uniform(p, nel[1])
    gu, gv = greville_points(ku), greville_points(kv)
    cp = np.zeros((ku.n, kv.n, 3))
    cp[..., 0] = x
    cp[..., 1] = gu[:, None]
    cp[..., 2] = z0 + (z1 - z0) * gv[None, :]
    return NurbsSurface(ku, kv, cp)


def test_orthogonal_crossing():
    a = flat_plate(1, 1, p=2, nel=(3, 3))
    (it,) = compute_intersections([a, vertical_plate(0.5)])
    assert it.kind == DIFFERENTIABLE
    assert np.allclose(it.xi_a[:, 0], 0.5)
    assert np.allclose(it.xi_b[:, 1], 0.5)
    assert np.allclose(it.xi_a[:, 1], np.linspace(0, 1, it.nel + 1))
    # floor of two samples per basis function: 2 * (3 elements + degree 2)
    assert it.nel == 2 * (3 + 2)
    assert it.end_pins == [(0, 1, 0.0), (0, 1, 1.0)]


def test_edge_contact_is_edge_kind():
    a = flat_plate(1, 1, p=2, nel=(3, 3))
    c = flat_plate(1, 1, p=3, nel=(2, 5))
    c = c.with_points((c.control_points + [1.0, 0, 0]).ravel())
    (it,) = compute_intersections([a, c])
    assert it.kind == EDGE
    assert np.allclose(it.xi_a[:, 0], 1) and np.allclose(it.xi_b[:, 0], 0)
    # 2 * (5 elements + degree 3) beats 2 per element
    assert it.nel == 2 * (5 + 3)


def test_disjoint_patches():
    a = flat_plate(1, 1, p=2, nel=(2, 2))
    assert compute_intersections([a, vertical_plate(2.0)]) == []


def test_curved_crossing_pairs_agree():
    cyl = quarter_cylinder(radius=2.0, height=1.0)
    # plane z = 0.4 cuts the quarter cylinder along an arc
    ku = KnotVector.uniform(1, 1)
    cp = np.array([[[-0.5, -0.5, 0.4], [-0.5, 2.5, 0.4]], [[2.5, -0.5, 0.4], [2.5, 2.5, 0.4]]])
    plane = NurbsSurface(ku, ku, cp)
    (it,) = compute_intersections([cyl, plane])
    Xa = eval_surface_points(cyl, it.xi_a)
    Xb = eval_surface_points(plane, it.xi_b)
    diam = 4.0
    assert np.max(np.linalg.norm(Xa - Xb, axis=1)) < 1e-8 * diam
    assert np.allclose(np.linalg.norm(Xa[:, :2], axis=1), 2.0, atol=1e-9)
    assert np.allclose(it.xi_a[:, 1], 0.4)
    # ends on the arc ends of the cylinder
    assert set(np.round(it.xi_a[[0, -1], 0], 9)) == {0.0, 1.0}
    # uniform physical spacing (up to chord/arc difference)
    h = np.linalg.norm(np.diff(Xa, axis=0), axis=1)
    assert np.ptp(h) < 1e-3 * h.mean()


def test_end_pins_prefer_side_a():
    xa = np.array([[0.2, 0.0], [0.3, 0.5], [0.4, 1.0]])
    xb = np.array([[0.0, 0.1], [0.5, 0.1], [1.0, 0.1]])
    assert infer_end_pins(xa, xb) == [(0, 1, 0.0), (0, 1, 1.0)]
