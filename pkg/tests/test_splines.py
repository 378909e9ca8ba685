import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shellopt.errors import DomainError, InvalidRefinementError
from models import curved_patch, identity_block, quarter_cylinder
from shellopt.splines import (
    FfdBlock,
    KnotVector,
    NurbsSurface,
    basis_derivs,
    eval_surface,
    eval_surface_points,
    eval_volume,
    find_span,
    greville_points,
    knot_refine,
    order_elevate,
    surface_basis,
    volume_basis,
)


def scan_span(knots, degree, u):
    n = len(knots) - degree - 1
    last = None
    for i in range(degree, n):
        if knots[i] <= u < knots[i + 1]:
            return i
        if knots[i] < knots[i + 1]:
            last = i
    return last


# --- find_span -------------------------------------------------------------


def test_find_span_examples():
    assert find_span(KnotVector(2, [0, 0, 0, 1, 1, 1]), 0.5) == 2
    assert find_span(KnotVector(1, [0, 0, 0.5, 1, 1]), 1.0) == 2
    kv = KnotVector(3, [0, 0, 0, 0, 0.25, 0.5, 0.75, 1, 1, 1, 1])
    assert find_span(kv, 0.3) == scan_span(kv.knots, 3, 0.3) == 4


@given(st.floats(0.0, 1.0))
def test_find_span_matches_scan(u):
    kv = KnotVector(2, [0, 0, 0, 0.2, 0.2, 0.7, 1, 1, 1])
    assert find_span(kv, u) == scan_span(kv.knots, 2, u)


def test_find_span_domain_error():
    with pytest.raises(DomainError):
        find_span(KnotVector(1, [0, 0, 1, 1]), 1.5)


# --- basis ----------------------------------------------------------------


def test_bernstein_midpoint():
    vals = basis_derivs(KnotVector(2, [0, 0, 0, 1, 1, 1]), 0.5, 0)
    np.testing.assert_allclose(vals[:, 0], [0.25, 0.5, 0.25], atol=1e-15)


def test_derivative_above_degree_is_zero():
    vals = basis_derivs(KnotVector(1, [0, 0, 0.5, 1, 1]), 0.3, 2)
    assert vals.shape == (2, 3)
    assert np.all(vals[:, 2] == 0.0)


def test_partition_of_unity_random():
    rng = np.random.default_rng(1)
    for p in range(0, 5):
        interior = np.sort(rng.random(4))
        kv = KnotVector(p, np.r_[np.zeros(p + 1), interior, np.ones(p + 1)])
        for u in rng.random(1000 // 5):
            d = basis_derivs(kv, u, 1)
            assert abs(d[:, 0].sum() - 1.0) <= 1e-12
            assert abs(d[:, 1].sum()) <= 1e-9


def _full_basis(kv, u):
    out = np.zeros(kv.n)
    s = find_span(kv, u)
    out[s - kv.degree : s + 1] = basis_derivs(kv, u, 0)[:, 0]
    return out


def _full_deriv(kv, u, k):
    out = np.zeros(kv.n)
    s = find_span(kv, u)
    out[s - kv.degree : s + 1] = basis_derivs(kv, u, k)[:, k]
    return out


def test_second_derivatives_match_finite_differences():
    kv = KnotVector.uniform(3, 4)
    u, h = 0.3, 1e-5
    fd1 = (_full_basis(kv, u + h) - _full_basis(kv, u - h)) / (2 * h)
    fd2 = (_full_basis(kv, u + h) - 2 * _full_basis(kv, u) + _full_basis(kv, u - h)) / h**2
    d1 = _full_deriv(kv, u, 1)
    d2 = _full_deriv(kv, u, 2)
    assert np.linalg.norm(fd1 - d1) / np.linalg.norm(d1) < 1e-6
    # second-difference rounding is ~eps/h^2; FD of the analytic first
    # derivative gives the 1e-6 level check
    fd2b = (_full_deriv(kv, u + h, 1) - _full_deriv(kv, u - h, 1)) / (2 * h)
    assert np.linalg.norm(fd2b - d2) / np.linalg.norm(d2) < 1e-6
    assert np.linalg.norm(fd2 - d2) / np.linalg.norm(d2) < 1e-4


# --- surfaces -------------------------------------------------------------


def test_flat_identity_patch():
    kv = KnotVector(1, [0, 0, 1, 1])
    cp = np.array([[[0, 0, 0], [0, 1, 0]], [[1, 0, 0], [1, 1, 0]]], dtype=float)
    s = NurbsSurface(kv, kv, cp)
    skl = eval_surface(s, (0.3, 0.7), 1)
    np.testing.assert_allclose(skl[0, 0], [0.3, 0.7, 0], atol=1e-15)
    np.testing.assert_allclose(skl[1, 0], [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(skl[0, 1], [0, 1, 0], atol=1e-15)


def test_quarter_circle_is_exact():
    s = quarter_cylinder(radius=2.0)
    rng = np.random.default_rng(0)
    pts = eval_surface_points(s, rng.random((200, 2)))
    r = np.hypot(pts[:, 0], pts[:, 1])
    assert np.max(np.abs(r - 2.0)) < 1e-12


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_surface_derivatives_match_fd(seed):
    s = curved_patch(seed)
    rng = np.random.default_rng(seed + 10)
    for xi in rng.uniform(0.05, 0.95, (5, 2)):
        skl = eval_surface(s, xi, 2)
        h = 1e-6
        for a, e in ((1, 0), (0, 1)):
            dxi = np.array([a, e]) * h
            fd = (eval_surface(s, xi + dxi, 0)[0, 0] - eval_surface(s, xi - dxi, 0)[0, 0]) / (2 * h)
            ref = skl[a, e]
            assert np.linalg.norm(fd - ref) <= 1e-6 * np.linalg.norm(ref)
        h = 1e-5
        for (i, j), (a, e) in (((2, 0), (1, 0)), ((1, 1), (0, 1)), ((0, 2), (0, 1))):
            dxi = np.array([a, e]) * h
            base = (1, 0) if (i, j) != (0, 2) else (0, 1)
            fd = (
                eval_surface(s, xi + dxi, 1)[base] - eval_surface(s, xi - dxi, 1)[base]
            ) / (2 * h)
            ref = skl[i, j]
            assert np.linalg.norm(fd - ref) <= 1e-6 * max(np.linalg.norm(ref), 1.0)


def test_surface_basis_agrees_with_eval_surface():
    s = curved_patch(3)
    rng = np.random.default_rng(3)
    pts = rng.random((20, 2))
    idx, R = surface_basis(s, pts, 2)
    P = s.flat_points()
    for m, xi in enumerate(pts):
        skl = eval_surface(s, xi, 2)
        derivs = [skl[0, 0], skl[1, 0], skl[0, 1], skl[2, 0], skl[1, 1], skl[0, 2]]
        for k, ref in enumerate(derivs):
            np.testing.assert_allclose(R[m, k] @ P[idx[m]], ref, atol=1e-10, rtol=1e-10)


# --- volumes --------------------------------------------------------------


def test_identity_volume():
    b = identity_block()
    pt, vals, _ = eval_volume(b, (0.2, 0.4, 0.9))
    np.testing.assert_allclose(pt, [0.2, 0.4, 0.9], atol=1e-15)


def test_volume_partition_of_unity():
    b = identity_block(p=2, nel=(3, 2, 1))
    rng = np.random.default_rng(0)
    _, vals = volume_basis(b, rng.random((100, 3)))
    np.testing.assert_allclose(vals.sum(axis=1), 1.0, atol=1e-14)


def test_arch_like_block_reproduces_greville_lattice():
    b = identity_block(p=2, nel=(4, 1, 1), lo=(0, 0, 0), hi=(10, 3, 6))
    gs = [greville_points(kv) for kv in b.kvs]
    for i, a in enumerate(gs[0]):
        for j, c in enumerate(gs[1]):
            for k, e in enumerate(gs[2]):
                pt, _, _ = eval_volume(b, (a, c, e))
                np.testing.assert_allclose(pt, b.control_points[i, j, k], atol=1e-12)


# --- refinement -----------------------------------------------------------


def _eval_equal(s1, s2, n=50, seed=0):
    pts = np.random.default_rng(seed).random((n, 2))
    return np.max(np.abs(eval_surface_points(s1, pts) - eval_surface_points(s2, pts)))


def test_elevate_zero_is_identity():
    s = curved_patch()
    s2, T = order_elevate(s, 0, 0)
    np.testing.assert_allclose(T.toarray(), np.eye(s.ncp), atol=1e-15)


def test_linear_to_cubic_flat_patch():
    kv = KnotVector(1, [0, 0, 1, 1])
    cp = np.array([[[0, 0, 0], [0, 2, 0]], [[3, 0, 0], [3.5, 2, 0]]], dtype=float)
    s = NurbsSurface(kv, kv, cp)
    s2, T = order_elevate(s, 2, 2)
    assert s2.degrees == (3, 3)
    assert _eval_equal(s, s2) < 1e-12


def test_tbeam_design_elevation_degrees():
    # design model degrees [3,1] and [1,1] with one knot span -> [3,3]
    for p, q in ((3, 1), (1, 1)):
        ku = KnotVector(p, [0] * (p + 1) + [1] * (p + 1))
        kv = KnotVector(q, [0] * (q + 1) + [1] * (q + 1))
        rng = np.random.default_rng(p + q)
        s = NurbsSurface(ku, kv, rng.random((ku.n, kv.n, 3)))
        s2, T = order_elevate(s, 3 - p, 3 - q)
        assert s2.degrees == (3, 3)
        np.testing.assert_array_equal(s2.knots_u.knots, [0, 0, 0, 0, 1, 1, 1, 1])
        np.testing.assert_array_equal(s2.knots_v.knots, [0, 0, 0, 0, 1, 1, 1, 1])
        assert _eval_equal(s, s2) < 1e-12


def test_refine_empty_is_identity():
    s = curved_patch()
    s2, T = knot_refine(s, [], [])
    np.testing.assert_allclose(T.toarray(), np.eye(s.ncp), atol=1e-15)


def test_refine_midpoint_curved_patch():
    s = quarter_cylinder()
    s2, T = knot_refine(s, [0.5], [0.5])
    assert _eval_equal(s, s2) < 1e-12
    np.testing.assert_allclose(T @ s.flat_points(), s2.flat_points(), atol=1e-14)


def test_refine_multiplicity_overflow():
    s = quarter_cylinder()
    with pytest.raises(InvalidRefinementError):
        knot_refine(s, [0.5, 0.5, 0.5], [])


def test_multilevel_chain_elevate_then_refine():
    ku = KnotVector(3, [0] * 4 + [1] * 4)
    kv = KnotVector(1, [0, 0, 1, 1])
    rng = np.random.default_rng(7)
    s = NurbsSurface(ku, kv, rng.random((4, 2, 3)))
    s_oe, T1 = order_elevate(s, 0, 2)
    s_an, T2 = knot_refine(s_oe, [0.25, 0.5, 0.75], [1 / 3, 2 / 3])
    assert _eval_equal(s, s_an) < 1e-12
    np.testing.assert_allclose((T2 @ T1) @ s.flat_points(), s_an.flat_points(), atol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 2), st.integers(0, 2))
def test_refinement_invariance_property(seed, ru, rv):
    s = curved_patch(seed, p=2, q=2, nel=(2, 2))
    s2, T = order_elevate(s, ru, rv)
    s3, T3 = knot_refine(s2, [0.3], [0.6])
    assert _eval_equal(s, s3, seed=seed) < 1e-12
    np.testing.assert_allclose(T3 @ (T @ s.flat_points()), s3.flat_points(), atol=1e-12)


# --- greville ---------------------------------------------------------------


def test_greville_examples():
    np.testing.assert_allclose(greville_points(KnotVector(1, [0, 0, 1, 1])), [0, 1])
    np.testing.assert_allclose(greville_points(KnotVector(2, [0, 0, 0, 1, 1, 1])), [0, 0.5, 1])
    kv = KnotVector(2, [0, 0, 0, 0.25, 0.5, 0.75, 1, 1, 1])
    oracle = [np.mean(kv.knots[i + 1 : i + 3]) for i in range(kv.n)]
    np.testing.assert_allclose(greville_points(kv), oracle)
    np.testing.assert_allclose(oracle, [0, 0.125, 0.375, 0.625, 0.875, 1])
