"""Tensor-product B-spline / NURBS kernel.

Open (clamped) knot vectors on [0, 1] only. Evaluation follows the
Cox-de Boor recursions; rational derivatives are obtained from the
homogeneous (weighted) derivatives by the quotient rule. Refinement
operations return the geometry-preserving linear map on control points as a
sparse matrix so it can be chained by the derivative graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np
import scipy.sparse as sp

from .errors import DomainError, InvalidRefinementError

_KNOT_TOL = 1e-12

# derivative orders (i, j) in the order used by ``surface_basis``
SURFACE_DERIVS = ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))


@dataclass(frozen=True, eq=False)
class KnotVector:
    degree: int
    knots: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", k)
        p = int(self.degree)
        object.__setattr__(self, "degree", p)
        if p < 0:
            raise ValueError("degree must be non-negative")
        if k.ndim != 1 or np.any(np.diff(k) < 0):
            raise ValueError("knots must be a non-decreasing sequence")
        if len(k) - p - 1 < p + 1:
            raise ValueError("too few knots for the degree")
        if np.any(k[: p + 1] != k[0]) or np.any(k[-p - 1 :] != k[-1]):
            raise ValueError("knot vector must be open (end multiplicity degree+1)")

    @classmethod
    def uniform(cls, degree: int, nel: int, continuity: int | None = None):
        """Open uniform knot vector on [0, 1] with ``nel`` elements."""
        if continuity is None:
            continuity = degree - 1
        mult = degree - continuity
        interior = np.repeat(np.linspace(0.0, 1.0, nel + 1)[1:-1], mult)
        k = np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])
        return cls(degree, k)

    @property
    def n(self) -> int:
        """Number of basis functions."""
        return len(self.knots) - self.degree - 1

    @property
    def breaks(self) -> np.ndarray:
        return np.unique(self.knots)

    @property
    def nel(self) -> int:
        return len(self.breaks) - 1

    def multiplicity(self, u: float) -> int:
        return int(np.sum(np.abs(self.knots - u) < _KNOT_TOL))

    def __eq__(self, other):
        return (
            isinstance(other, KnotVector)
            and self.degree == other.degree
            and np.array_equal(self.knots, other.knots)
        )

    def __hash__(self):
        return hash((self.degree, self.knots.tobytes()))


def find_span(kv: KnotVector, u: float) -> int:
    """Index i with knots[i] <= u < knots[i+1]; u at the right end maps to
    the last non-empty span."""
    k = kv.knots
    if not (k[0] - _KNOT_TOL <= u <= k[-1] + _KNOT_TOL) or not np.isfinite(u):
        raise DomainError(f"u={u!r} outside knot range [{k[0]}, {k[-1]}]")
    return int(_spans(kv, np.array([u], dtype=float))[0])


def _spans(kv: KnotVector, us: np.ndarray) -> np.ndarray:
    k = kv.knots
    p = kv.degree
    us = np.clip(us, k[0], k[-1])
    s = np.searchsorted(k, us, side="right") - 1
    return np.clip(s, p, kv.n - 1)


def _ders_many(kv: KnotVector, us: np.ndarray, nderiv: int):
    """Vectorised Piegl-Tiller A2.3.

    Returns spans (m,) and ders (m, nderiv+1, p+1) where ders[:, k, r] is
    the k-th derivative of N_{span-p+r}.
    """
    us = np.atleast_1d(np.asarray(us, dtype=float))
    k = kv.knots
    if np.any(us < k[0] - _KNOT_TOL) or np.any(us > k[-1] + _KNOT_TOL) or not np.all(
        np.isfinite(us)
    ):
        raise DomainError(f"parameter outside knot range [{k[0]}, {k[-1]}]")
    us = np.clip(us, k[0], k[-1])
    p = kv.degree
    m = len(us)
    spans = _spans(kv, us)
    nd = min(nderiv, p)

    ndu = np.zeros((m, p + 1, p + 1))
    ndu[:, 0, 0] = 1.0
    left = np.zeros((m, p + 1))
    right = np.zeros((m, p + 1))
    for j in range(1, p + 1):
        left[:, j] = us - k[spans + 1 - j]
        right[:, j] = k[spans + j] - us
        saved = np.zeros(m)
        for r in range(j):
            ndu[:, j, r] = right[:, r + 1] + left[:, j - r]
            temp = ndu[:, r, j - 1] / ndu[:, j, r]
            ndu[:, r, j] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        ndu[:, j, j] = saved

    ders = np.zeros((m, nderiv + 1, p + 1))
    ders[:, 0, :] = ndu[:, :, p]
    a = np.zeros((m, 2, p + 1))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[:] = 0.0
        a[:, 0, 0] = 1.0
        for kk in range(1, nd + 1):
            d = np.zeros(m)
            rk = r - kk
            pk = p - kk
            if r >= kk:
                a[:, s2, 0] = a[:, s1, 0] / ndu[:, pk + 1, rk]
                d = a[:, s2, 0] * ndu[:, rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = kk - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[:, s2, j] = (a[:, s1, j] - a[:, s1, j - 1]) / ndu[:, pk + 1, rk + j]
                d = d + a[:, s2, j] * ndu[:, rk + j, pk]
            if r <= pk:
                a[:, s2, kk] = -a[:, s1, kk - 1] / ndu[:, pk + 1, r]
                d = d + a[:, s2, kk] * ndu[:, r, pk]
            ders[:, kk, r] = d
            s1, s2 = s2, s1
    fac = p
    for kk in range(1, nd + 1):
        ders[:, kk, :] *= fac
        fac *= p - kk
    return spans, ders


def basis_derivs(kv: KnotVector, u: float, nderiv: int) -> np.ndarray:
    """Non-zero basis functions at ``u`` and their derivatives.

    Returns an array of shape (degree+1, nderiv+1); row k holds
    N_{span-degree+k} and its u-derivatives. Orders above the degree are zero.
    """
    find_span(kv, u)
    _, d = _ders_many(kv, np.array([u], dtype=float), nderiv)
    return d[0].T.copy()


def basis_matrix(kv: KnotVector, us, deriv: int = 0) -> sp.csr_matrix:
    """Sparse (len(us), n) matrix of the ``deriv``-th derivative of all basis
    functions at the points ``us``."""
    us = np.atleast_1d(np.asarray(us, dtype=float))
    spans, d = _ders_many(kv, us, deriv)
    p = kv.degree
    rows = np.repeat(np.arange(len(us)), p + 1)
    cols = (spans[:, None] - p + np.arange(p + 1)[None, :]).ravel()
    return sp.csr_matrix((d[:, deriv, :].ravel(), (rows, cols)), shape=(len(us), kv.n))


def greville_points(kv: KnotVector) -> np.ndarray:
    p = kv.degree
    if p == 0:
        return 0.5 * (kv.knots[:-1] + kv.knots[1:])
    k = kv.knots
    return np.array([k[i + 1 : i + p + 1].mean() for i in range(kv.n)])


@dataclass(eq=False)
class NurbsSurface:
    """NURBS surface; control points are stored as an (n_u, n_v, 3) grid."""

    knots_u: KnotVector
    knots_v: KnotVector
    control_points: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        cp = np.asarray(self.control_points, dtype=float)
        nu, nv = self.knots_u.n, self.knots_v.n
        if cp.shape != (nu, nv, 3):
            raise ValueError(f"control grid {cp.shape} does not match basis counts ({nu}, {nv}, 3)")
        self.control_points = cp
        if self.weights is None:
            self.weights = np.ones((nu, nv))
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (nu, nv):
            raise ValueError("weights grid does not match control grid")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        self.weights = w

    @property
    def degrees(self):
        return (self.knots_u.degree, self.knots_v.degree)

    @property
    def shape(self):
        return (self.knots_u.n, self.knots_v.n)

    @property
    def ncp(self) -> int:
        return self.knots_u.n * self.knots_v.n

    @property
    def is_rational(self) -> bool:
        return not np.allclose(self.weights, 1.0, rtol=0, atol=0)

    def flat_points(self) -> np.ndarray:
        """Control points as (ncp, 3), u-index outer."""
        return self.control_points.reshape(-1, 3)

    def with_points(self, flat) -> "NurbsSurface":
        return NurbsSurface(
            self.knots_u,
            self.knots_v,
            np.asarray(flat, dtype=float).reshape(self.knots_u.n, self.knots_v.n, 3),
            self.weights.copy(),
        )

    def elements(self):
        """Parametric element boxes ((u0, u1), (v0, v1)) in u-outer order."""
        bu, bv = self.knots_u.breaks, self.knots_v.breaks
        return [
            ((bu[i], bu[i + 1]), (bv[j], bv[j + 1]))
            for i in range(len(bu) - 1)
            for j in range(len(bv) - 1)
        ]


def surface_basis(s: NurbsSurface, pts, nderiv: int = 0):
    """Rational basis functions and parametric derivatives at many points.

    Returns ``idx`` (m, nloc) global control point indices and ``R``
    (m, nd, nloc) with nd = 1, 3 or 6 following ``SURFACE_DERIVS``.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    p, q = s.degrees
    su, du = _ders_many(s.knots_u, pts[:, 0], nderiv)
    sv, dv = _ders_many(s.knots_v, pts[:, 1], nderiv)
    iu = su[:, None] - p + np.arange(p + 1)[None, :]
    iv = sv[:, None] - q + np.arange(q + 1)[None, :]
    nv = s.knots_v.n
    idx = (iu[:, :, None] * nv + iv[:, None, :]).reshape(len(pts), -1)
    w = s.weights.ravel()[idx]
    orders = [o for o in SURFACE_DERIVS if o[0] + o[1] <= nderiv]
    # homogeneous (weighted) basis derivatives
    Nw = np.stack(
        [(du[:, a, :, None] * dv[:, b, None, :]).reshape(len(pts), -1) * w for a, b in orders],
        axis=1,
    )
    W = Nw.sum(axis=2)
    R = np.empty_like(Nw)
    R[:, 0] = Nw[:, 0] / W[:, :1]
    if nderiv >= 1:
        for c in (1, 2):
            R[:, c] = (Nw[:, c] - R[:, 0] * W[:, c : c + 1]) / W[:, :1]
    if nderiv >= 2:
        # (2,0), (1,1), (0,2)
        R[:, 3] = (Nw[:, 3] - 2 * R[:, 1] * W[:, 1:2] - R[:, 0] * W[:, 3:4]) / W[:, :1]
        R[:, 4] = (
            Nw[:, 4] - R[:, 1] * W[:, 2:3] - R[:, 2] * W[:, 1:2] - R[:, 0] * W[:, 4:5]
        ) / W[:, :1]
        R[:, 5] = (Nw[:, 5] - 2 * R[:, 2] * W[:, 2:3] - R[:, 0] * W[:, 5:6]) / W[:, :1]
    return idx, R


def surface_basis_matrix(s: NurbsSurface, pts, which: int = 0) -> sp.csr_matrix:
    """Sparse (m, ncp) matrix of one rational basis derivative (index into
    ``SURFACE_DERIVS``) at the points."""
    nderiv = 0 if which == 0 else (1 if which < 3 else 2)
    idx, R = surface_basis(s, pts, nderiv)
    m = idx.shape[0]
    rows = np.repeat(np.arange(m), idx.shape[1])
    return sp.csr_matrix((R[:, which].ravel(), (rows, idx.ravel())), shape=(m, s.ncp))


def eval_surface(s: NurbsSurface, xi, nderiv: int = 0) -> np.ndarray:
    """Point and parametric partials at ``xi``.

    Returns SKL with shape (nderiv+1, nderiv+1, 3); SKL[i, j] is the
    derivative d^{i+j} X / du^i dv^j (entries with i+j > nderiv are zero).
    """
    u, v = float(xi[0]), float(xi[1])
    p, q = s.degrees
    su = find_span(s.knots_u, u)
    sv = find_span(s.knots_v, v)
    _, du = _ders_many(s.knots_u, np.array([u]), nderiv)
    _, dv = _ders_many(s.knots_v, np.array([v]), nderiv)
    du, dv = du[0], dv[0]
    P = s.control_points[su - p : su + 1, sv - q : sv + 1]
    w = s.weights[su - p : su + 1, sv - q : sv + 1]
    Pw = np.concatenate([P * w[..., None], w[..., None]], axis=2)
    # homogeneous derivatives A (wx) and wders
    H = np.zeros((nderiv + 1, nderiv + 1, 4))
    for i in range(nderiv + 1):
        for j in range(nderiv + 1 - i):
            H[i, j] = np.einsum("a,b,abk->k", du[i], dv[j], Pw)
    Aders, wders = H[..., :3], H[..., 3]
    SKL = np.zeros((nderiv + 1, nderiv + 1, 3))
    for k in range(nderiv + 1):
        for l in range(nderiv + 1 - k):
            v_ = Aders[k, l].copy()
            for j in range(1, l + 1):
                v_ -= comb(l, j) * wders[0, j] * SKL[k, l - j]
            for i in range(1, k + 1):
                v_ -= comb(k, i) * wders[i, 0] * SKL[k - i, l]
                v2 = np.zeros(3)
                for j in range(1, l + 1):
                    v2 += comb(l, j) * wders[i, j] * SKL[k - i, l - j]
                v_ -= comb(k, i) * v2
            SKL[k, l] = v_ / wders[0, 0]
    return SKL


def eval_surface_points(s: NurbsSurface, pts) -> np.ndarray:
    """Vectorised point evaluation, (m, 2) -> (m, 3)."""
    idx, R = surface_basis(s, pts, 0)
    return np.einsum("mk,mkc->mc", R[:, 0], s.flat_points()[idx])


@dataclass(eq=False)
class FfdBlock:
    """Trivariate B-spline block (weights identically one)."""

    knots_u: KnotVector
    knots_v: KnotVector
    knots_w: KnotVector
    control_points: np.ndarray
    bounds: np.ndarray = field(default=None)

    def __post_init__(self):
        cp = np.asarray(self.control_points, dtype=float)
        shape = (self.knots_u.n, self.knots_v.n, self.knots_w.n, 3)
        if cp.shape != shape:
            raise ValueError(f"lattice {cp.shape} does not match {shape}")
        self.control_points = cp
        if self.bounds is not None:
            self.bounds = np.asarray(self.bounds, dtype=float)

    @property
    def kvs(self):
        return (self.knots_u, self.knots_v, self.knots_w)

    @property
    def shape(self):
        return tuple(kv.n for kv in self.kvs)

    @property
    def ncp(self):
        return int(np.prod(self.shape))

    def flat_points(self):
        return self.control_points.reshape(-1, 3)


def volume_basis(b: FfdBlock, pts):
    """Trivariate basis values at points: idx (m, nloc), values (m, nloc)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    degs = [kv.degree for kv in b.kvs]
    data = [_ders_many(kv, pts[:, a], 0) for a, kv in enumerate(b.kvs)]
    n1, n2 = b.shape[1], b.shape[2]
    ids = [s[:, None] - p + np.arange(p + 1)[None, :] for (s, _), p in zip(data, degs)]
    idx = (
        ids[0][:, :, None, None] * (n1 * n2)
        + ids[1][:, None, :, None] * n2
        + ids[2][:, None, None, :]
    ).reshape(len(pts), -1)
    vals = (
        data[0][1][:, 0, :, None, None]
        * data[1][1][:, 0, None, :, None]
        * data[2][1][:, 0, None, None, :]
    ).reshape(len(pts), -1)
    return idx, vals


def volume_basis_matrix(b: FfdBlock, pts) -> sp.csr_matrix:
    idx, vals = volume_basis(b, pts)
    m = idx.shape[0]
    rows = np.repeat(np.arange(m), idx.shape[1])
    return sp.csr_matrix((vals.ravel(), (rows, idx.ravel())), shape=(m, b.ncp))


def eval_volume(b: FfdBlock, xi):
    """Point of the block at ``xi`` plus the basis values and their global
    (flattened lattice) indices."""
    idx, vals = volume_basis(b, np.asarray(xi, dtype=float)[None, :])
    point = vals[0] @ b.flat_points()[idx[0]]
    return point, vals[0], idx[0]


# --- refinement -----------------------------------------------------------


def _insert_knot_operator(kv: KnotVector, u: float):
    """Boehm single knot insertion; returns (new kv, (n+1, n) operator)."""
    p = kv.degree
    k = kv.knots
    kspan = find_span(kv, u)
    n = kv.n
    T = np.zeros((n + 1, n))
    for i in range(n + 1):
        if i <= kspan - p:
            T[i, i] = 1.0
        elif i > kspan:
            T[i, i - 1] = 1.0
        else:
            a = (u - k[i]) / (k[i + p] - k[i])
            T[i, i] = a
            T[i, i - 1] = 1.0 - a
    newk = np.insert(k, kspan + 1, u)
    return KnotVector(p, newk), T


def refine_operator_1d(kv: KnotVector, new_knots):
    """Knot insertion operator for a 1D basis (on homogeneous coordinates)."""
    new_knots = np.sort(np.atleast_1d(np.asarray(new_knots, dtype=float)))
    p = kv.degree
    for u in np.unique(new_knots):
        if not (kv.knots[0] < u < kv.knots[-1]):
            raise InvalidRefinementError(f"knot {u} not strictly inside the domain")
        total = kv.multiplicity(u) + int(np.sum(np.abs(new_knots - u) < _KNOT_TOL))
        if total > p:
            raise InvalidRefinementError(
                f"inserting {u} gives multiplicity {total} > degree {p}"
            )
    T = np.eye(kv.n)
    cur = kv
    for u in new_knots:
        cur, Ti = _insert_knot_operator(cur, u)
        T = Ti @ T
    return cur, T


def elevate_operator_1d(kv: KnotVector, r: int):
    """Degree elevation by ``r`` keeping the continuity at every break.

    The elevated space contains the original one, so collocating both at
    the Greville points of the new basis gives the exact operator.
    """
    if r == 0:
        return kv, np.eye(kv.n)
    p = kv.degree
    br = kv.breaks
    mults = [kv.multiplicity(b) for b in br]
    knots = np.concatenate(
        [np.repeat(b, m + r) for b, m in zip(br, mults)]
    )
    new = KnotVector(p + r, knots)
    g = greville_points(new)
    Nn = basis_matrix(new, g).toarray()
    No = basis_matrix(kv, g).toarray()
    T = np.linalg.solve(Nn, No)
    T[np.abs(T) < 1e-14] = 0.0
    return new, T


def _rational_operator(s: NurbsSurface, new_u, new_v, Tu, Tv):
    T = sp.kron(sp.csr_matrix(Tu), sp.csr_matrix(Tv)).tocsr()
    w = s.weights.ravel()
    Pw = s.flat_points() * w[:, None]
    w_new = T @ w
    P_new = (T @ Pw) / w_new[:, None]
    surf = NurbsSurface(
        new_u, new_v, P_new.reshape(new_u.n, new_v.n, 3), w_new.reshape(new_u.n, new_v.n)
    )
    op = (sp.diags(1.0 / w_new) @ T @ sp.diags(w)).tocsr()
    op.eliminate_zeros()
    return surf, op


def order_elevate(s: NurbsSurface, raise_u: int, raise_v: int):
    """Geometry-preserving order elevation.

    Returns the new surface and the sparse operator mapping old control
    points (ncp_old rows of xyz) to new ones.
    """
    if raise_u < 0 or raise_v < 0:
        raise ValueError("elevation must be non-negative")
    ku, Tu = elevate_operator_1d(s.knots_u, raise_u)
    kv_, Tv = elevate_operator_1d(s.knots_v, raise_v)
    return _rational_operator(s, ku, kv_, Tu, Tv)


def knot_refine(s: NurbsSurface, new_knots_u=(), new_knots_v=()):
    """Geometry-preserving knot insertion in both directions."""
    ku, Tu = refine_operator_1d(s.knots_u, new_knots_u) if len(new_knots_u) else (
        s.knots_u,
        np.eye(s.knots_u.n),
    )
    kv_, Tv = refine_operator_1d(s.knots_v, new_knots_v) if len(new_knots_v) else (
        s.knots_v,
        np.eye(s.knots_v.n),
    )
    return _rational_operator(s, ku, kv_, Tu, Tv)
