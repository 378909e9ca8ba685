"""Surface-surface intersection tracing between NURBS patches.

Candidates come from a dense parametric sampling of each patch: sign changes
of the signed distance to the other patch (transversal crossings) and
samples lying on the other patch (edge contacts). Candidates are refined
onto the exact intersection by a two-surface Newton iteration, grouped into
curves, extended to the patch boundaries and resampled at uniform physical
spacing.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import IntersectionTraceError
from .splines import NurbsSurface, surface_basis

EDGE = "edge"
DIFFERENTIABLE = "differentiable"


@dataclass(eq=False)
class Intersection:
    """Paired parametric polylines along one patch-patch intersection.

    ``xi_a`` and ``xi_b`` are (n+1, 2) node coordinates on ``patch_a`` and
    ``patch_b``. ``end_pins`` records, for the first and last node, which
    side (0 for a, 1 for b) and coordinate sits on a patch edge and at which
    value; it is inferred once and frozen.
    """

    patch_a: int
    patch_b: int
    xi_a: np.ndarray
    xi_b: np.ndarray
    kind: str = EDGE
    mortar_resolution: int = 2
    end_pins: list = field(default_factory=list)

    def __post_init__(self):
        self.xi_a = np.asarray(self.xi_a, dtype=float)
        self.xi_b = np.asarray(self.xi_b, dtype=float)
        if self.xi_a.shape != self.xi_b.shape or self.xi_a.shape[0] < 2:
            raise ValueError("intersection polylines must pair at least two nodes")
        if not self.end_pins:
            self.end_pins = infer_end_pins(self.xi_a, self.xi_b)

    @property
    def nel(self):
        return self.xi_a.shape[0] - 1


def infer_end_pins(xi_a, xi_b, tol=1e-8):
    """Pick an edge coordinate for each end node, preferring side a."""
    pins = []
    for j in (0, -1):
        choice = None
        for side, xi in ((0, xi_a), (1, xi_b)):
            for c in (0, 1):
                for val in (0.0, 1.0):
                    if choice is None and abs(xi[j, c] - val) < tol:
                        # a coordinate constant along the whole curve is not
                        # a usable end pin unless nothing else is available
                        if np.all(np.abs(xi[:, c] - val) < tol):
                            continue
                        choice = (side, c, val)
        if choice is None:
            for side, xi in ((0, xi_a), (1, xi_b)):
                for c in (0, 1):
                    for val in (0.0, 1.0):
                        if choice is None and abs(xi[j, c] - val) < tol:
                            choice = (side, c, val)
        pins.append(choice)
    return pins


def classify(xi_a, xi_b, tol=1e-8):
    """``edge`` if the curve runs along a boundary edge of both patches."""

    def on_edge(xi):
        return any(np.all(np.abs(xi[:, c] - v) < tol) for c in (0, 1) for v in (0.0, 1.0))

    return EDGE if on_edge(xi_a) and on_edge(xi_b) else DIFFERENTIABLE


# --- batched evaluation ------------------------------------------------------


def _evaluate(s: NurbsSurface, pts, nderiv=1):
    idx, R = surface_basis(s, np.clip(pts, 0.0, 1.0), nderiv)
    return np.einsum("mdl,mlc->mdc", R, s.flat_points()[idx])


def _grid(n):
    g = np.linspace(0.0, 1.0, n + 1)
    U, V = np.meshgrid(g, g, indexing="ij")
    return np.stack([U.ravel(), V.ravel()], axis=1)


def project(s: NurbsSurface, points, guess=None, iters=40):
    """Closest-point parameters on ``s`` for physical points (Gauss-Newton
    with clamping to the unit square)."""
    X = np.atleast_2d(points)
    if guess is None:
        g = _grid(64)
        tree = cKDTree(_evaluate(s, g, 0)[:, 0])
        guess = g[tree.query(X)[1]]
    xi = np.array(guess, dtype=float)
    for _ in range(iters):
        D = _evaluate(s, xi, 1)
        r = D[:, 0] - X
        J = D[:, 1:3].transpose(0, 2, 1)  # (m, 3, 2)
        JtJ = np.einsum("mci,mcj->mij", J, J)
        Jtr = np.einsum("mci,mc->mi", J, r)
        step = -np.linalg.solve(JtJ + 1e-300 * np.eye(2), Jtr[..., None])[..., 0]
        new = np.clip(xi + step, 0.0, 1.0)
        if np.max(np.abs(new - xi)) < 1e-15:
            xi = new
            break
        xi = new
    return xi


def _pair_newton(sa, sb, xa, xb, iters=60, tol=1e-14):
    """Refine paired parameters onto X_a(xa) = X_b(xb) with min-norm
    Gauss-Newton steps; clamped coordinates pushing outward are frozen."""
    xa, xb = np.array(xa, float), np.array(xb, float)
    m = len(xa)
    res = np.full(m, np.inf)
    for _ in range(iters):
        Da, Db = _evaluate(sa, xa, 1), _evaluate(sb, xb, 1)
        F = Da[:, 0] - Db[:, 0]
        res = np.linalg.norm(F, axis=1)
        J = np.concatenate([Da[:, 1:3], -Db[:, 1:3]], axis=1).transpose(0, 2, 1)  # (m,3,4)
        x = np.concatenate([xa, xb], axis=1)
        dx = np.zeros_like(x)
        for i in range(m):
            if res[i] < tol:
                continue
            free = np.ones(4, dtype=bool)
            for _ in range(3):
                Ji = J[i][:, free]
                d = -np.linalg.lstsq(Ji, F[i], rcond=None)[0]
                full = np.zeros(4)
                full[free] = d
                out = ((x[i] <= 0) & (full < 0)) | ((x[i] >= 1) & (full > 0))
                if not out.any():
                    break
                free &= ~out
                full[out] = 0.0
            dx[i] = full
        if np.max(np.abs(dx)) < 1e-16:
            break
        x = np.clip(x + dx, 0.0, 1.0)
        xa, xb = x[:, :2], x[:, 2:]
    Da, Db = _evaluate(sa, xa, 0), _evaluate(sb, xb, 0)
    res = np.linalg.norm(Da[:, 0] - Db[:, 0], axis=1)
    return xa, xb, res


def _constrained_newton(sa, sb, xa, xb, extra, frozen=None, iters=50):
    """Solve X_a - X_b = 0 plus one scalar equation ``extra(Da, Db, x) ->
    (value, gradient(4))`` for a single point pair, keeping ``frozen``
    coordinates fixed (edge-on-edge curves are tangential, so the remaining
    system is solved in the least-squares sense)."""
    x = np.r_[xa, xb].astype(float)
    free = np.ones(4, dtype=bool) if frozen is None else ~np.asarray(frozen)
    for _ in range(iters):
        Da = _evaluate(sa, x[None, :2], 1)[0]
        Db = _evaluate(sb, x[None, 2:], 1)[0]
        F = np.r_[Da[0] - Db[0], 0.0]
        J = np.zeros((4, 4))
        J[:3, :2] = Da[1:3].T
        J[:3, 2:] = -Db[1:3].T
        F[3], J[3] = extra(Da, Db, x)
        dx = np.zeros(4)
        dx[free] = -np.linalg.lstsq(J[:, free], F, rcond=None)[0]
        x = np.clip(x + dx, 0.0, 1.0)
        if np.max(np.abs(dx)) < 1e-15:
            break
    Da = _evaluate(sa, x[None, :2], 1)[0]
    Db = _evaluate(sb, x[None, 2:], 1)[0]
    return x, np.linalg.norm(Da[0] - Db[0]), abs(extra(Da, Db, x)[0])


def _edge_coords(xa, xb, tol=1e-9):
    """Mask of (a_u, a_v, b_u, b_v) coordinates constant at 0 or 1."""
    x = np.c_[xa, xb]
    return np.array([np.all(np.abs(x[:, k]) < tol) or np.all(np.abs(x[:, k] - 1) < tol) for k in range(4)])


# --- tracing -----------------------------------------------------------------


def _candidates(sa, sb, n, touch_tol):
    """Candidate (xi_a, xi_b) pairs from sampling ``sa`` against ``sb``."""
    g = _grid(n)
    X = _evaluate(sa, g, 0)[:, 0]
    foot = project(sb, X)
    Db = _evaluate(sb, foot, 1)
    r = X - Db[:, 0]
    dist = np.linalg.norm(r, axis=1)
    nb = np.cross(Db[:, 1], Db[:, 2])
    nb /= np.linalg.norm(nb, axis=1)[:, None]
    sd = np.einsum("mc,mc->m", r, nb)
    interior = np.all((foot > 1e-9) & (foot < 1 - 1e-9), axis=1)
    # distance components that are not along the normal signal a clamped foot
    perp = np.sqrt(np.maximum(dist**2 - sd**2, 0.0))
    valid = interior | (perp < touch_tol)
    out_a, out_b = [g[dist < touch_tol]], [foot[dist < touch_tol]]
    ids = np.arange(len(g)).reshape(n + 1, n + 1)
    cell = np.max(np.linalg.norm(np.diff(X.reshape(n + 1, n + 1, 3), axis=0), axis=2))
    cell = max(cell, np.max(np.linalg.norm(np.diff(X.reshape(n + 1, n + 1, 3), axis=1), axis=2)))
    for i0, i1 in ((ids[:-1, :].ravel(), ids[1:, :].ravel()), (ids[:, :-1].ravel(), ids[:, 1:].ravel())):
        ok = valid[i0] & valid[i1] & (np.sign(sd[i0]) * np.sign(sd[i1]) < 0)
        ok &= (dist[i0] < 2 * cell) & (dist[i1] < 2 * cell)
        i0, i1 = i0[ok], i1[ok]
        t = (sd[i0] / (sd[i0] - sd[i1]))[:, None]
        out_a.append((1 - t) * g[i0] + t * g[i1])
        out_b.append((1 - t) * foot[i0] + t * foot[i1])
    return np.concatenate(out_a), np.concatenate(out_b), cell


def _order_chain(points):
    """Greedy nearest-neighbour ordering starting from an extreme point."""
    far = int(np.argmax(np.linalg.norm(points - points[0], axis=1)))
    order = [far]
    left = set(range(len(points))) - {far}
    while left:
        cur = points[order[-1]]
        nxt = min(left, key=lambda k: np.linalg.norm(points[k] - cur))
        order.append(nxt)
        left.remove(nxt)
    return np.array(order)


def _extend_to_boundary(sa, sb, xa, xb, direction, reach, frozen):
    """Move an end node along the curve until it hits a patch edge."""
    Da = _evaluate(sa, xa[None], 0)[0, 0]
    best = None
    for k in range(4):
        if frozen[k]:
            continue
        for val in (0.0, 1.0):

            def extra(_Da, _Db, x, k=k, val=val):
                grad = np.zeros(4)
                grad[k] = 1.0
                return x[k] - val, grad

            x, gap, err = _constrained_newton(sa, sb, xa, xb, extra, frozen)
            if gap > 1e-10 * reach * 1e2 or err > 1e-12:
                continue
            P = _evaluate(sa, x[None, :2], 0)[0, 0]
            ahead = np.dot(P - Da, direction)
            dist = np.linalg.norm(P - Da)
            if ahead < -1e-9 * reach or dist > reach:
                continue
            if best is None or dist < best[0]:
                best = (dist, x)
    if best is None:
        return xa, xb
    return best[1][:2], best[1][2:]


def _element_count(s: NurbsSurface, xi):
    bu, bv = s.knots_u.breaks, s.knots_v.breaks
    iu = np.clip(np.searchsorted(bu, xi[:, 0], side="right") - 1, 0, len(bu) - 2)
    iv = np.clip(np.searchsorted(bv, xi[:, 1], side="right") - 1, 0, len(bv) - 2)
    return len(set(zip(iu.tolist(), iv.tolist())))


def mortar_nel(sa, sb, xa, xb, mortar_resolution=2):
    """Quadrature-mesh element count: ``mortar_resolution`` per adjacent
    spline element, and never fewer than two midpoint samples per basis
    function along the curve (fewer leaves relative motions unpenalized)."""
    ea, eb = _element_count(sa, xa), _element_count(sb, xb)
    p = max(max(sa.degrees), max(sb.degrees))
    return max(mortar_resolution * max(ea, eb), 2 * (max(ea, eb) + p))


def _resample(sa, sb, xa, xb, nel, frozen):
    """Nodes at uniform physical arc length along the traced polyline."""
    X = _evaluate(sa, xa, 0)[:, 0]
    seg = np.linalg.norm(np.diff(X, axis=0), axis=1)
    s = np.r_[0.0, np.cumsum(seg)]
    targets = np.linspace(0.0, s[-1], nel + 1)
    out_a, out_b = [xa[0]], [xb[0]]
    for t in targets[1:-1]:
        k = min(np.searchsorted(s, t, side="right") - 1, len(seg) - 1)
        w = (t - s[k]) / seg[k] if seg[k] > 0 else 0.0
        ga = (1 - w) * xa[k] + w * xa[k + 1]
        gb = (1 - w) * xb[k] + w * xb[k + 1]
        target = (1 - w) * X[k] + w * X[k + 1]
        tang = X[k + 1] - X[k]
        tang /= np.linalg.norm(tang)

        def extra(Da, Db, x, target=target, tang=tang):
            grad = np.zeros(4)
            grad[:2] = Da[1:3] @ tang
            return np.dot(Da[0] - target, tang), grad

        x, gap, err = _constrained_newton(sa, sb, ga, gb, extra, frozen)
        if gap > 1e-9 * s[-1] or err > 1e-6 * s[-1]:
            raise IntersectionTraceError("resampling the intersection failed; specify it manually")
        out_a.append(x[:2])
        out_b.append(x[2:])
    out_a.append(xa[-1])
    out_b.append(xb[-1])
    return np.array(out_a), np.array(out_b)


def trace_pair(sa: NurbsSurface, sb: NurbsSurface, density=64, mortar_resolution=2, diameter=None):
    """All intersection curves between two surfaces as (xi_a, xi_b) node
    arrays ordered along each curve."""
    if diameter is None:
        P = np.r_[sa.flat_points(), sb.flat_points()]
        diameter = float(np.linalg.norm(P.max(axis=0) - P.min(axis=0)))
    touch = 1e-7 * diameter
    a1, b1, cell_a = _candidates(sa, sb, density, touch)
    b2, a2, cell_b = _candidates(sb, sa, density, touch)
    xa, xb = np.r_[a1, a2], np.r_[b1, b2]
    if len(xa) == 0:
        return []
    xa, xb, res = _pair_newton(sa, sb, xa, xb)
    ok = res < 1e-9 * diameter
    xa, xb = xa[ok], xb[ok]
    if len(xa) < 2:
        return []
    X = _evaluate(sa, xa, 0)[:, 0]
    # merge duplicates
    key = np.round(np.c_[xa, xb] / 1e-9).astype(np.int64)
    _, uniq = np.unique(key, axis=0, return_index=True)
    uniq = np.sort(uniq)
    xa, xb, X = xa[uniq], xb[uniq], X[uniq]
    cell = max(cell_a, cell_b)
    pairs = cKDTree(X).query_pairs(2.5 * cell, output_type="ndarray")
    adj = sp.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(X), len(X)))
    ncomp, labels = connected_components(adj, directed=False)
    curves = []
    for c in range(ncomp):
        sel = np.where(labels == c)[0]
        if len(sel) < 3:
            continue
        Xs = X[sel]
        if np.linalg.norm(Xs.max(axis=0) - Xs.min(axis=0)) < 0.5 * cell:
            continue
        order = sel[_order_chain(Xs)]
        ca, cb, cx = xa[order], xb[order], X[order]
        frozen = _edge_coords(ca, cb)
        for end in (0, -1):
            nb = -1 if end == -1 else 1
            direction = cx[end] - cx[end + nb if end == 0 else end - 1]
            direction /= max(np.linalg.norm(direction), 1e-300)
            na, nbb = _extend_to_boundary(sa, sb, ca[end], cb[end], direction, 3 * cell, frozen)
            if end == 0:
                ca, cb = np.r_[[na], ca], np.r_[[nbb], cb]
            else:
                ca, cb = np.r_[ca, [na]], np.r_[cb, [nbb]]
        nel = mortar_nel(sa, sb, ca, cb, mortar_resolution)
        ra, rb = _resample(sa, sb, ca, cb, nel, frozen)
        # deterministic orientation
        if tuple(ra[-1]) < tuple(ra[0]):
            ra, rb = ra[::-1].copy(), rb[::-1].copy()
        curves.append((ra, rb))
    return curves


def compute_intersections(surfaces, sampling_density=64, mortar_resolution=2, pairs=None, manual=None):
    """Intersections among a list of surfaces.

    ``manual`` maps (a, b) patch pairs to user-supplied ``(xi_a, xi_b)``
    polylines which replace tracing for that pair.
    """
    manual = manual or {}
    P = np.concatenate([s.flat_points() for s in surfaces])
    diameter = float(np.linalg.norm(P.max(axis=0) - P.min(axis=0)))
    n = len(surfaces)
    if pairs is None:
        pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    out = []
    for a, b in pairs:
        if (a, b) in manual:
            curves = [tuple(np.asarray(c, dtype=float) for c in manual[(a, b)])]
        else:
            sa, sb = surfaces[a], surfaces[b]
            if not _boxes_overlap(sa, sb, 1e-6 * diameter):
                continue
            curves = trace_pair(sa, sb, sampling_density, mortar_resolution, diameter)
        for xa, xb in curves:
            Xa = _evaluate(surfaces[a], xa, 0)[:, 0]
            Xb = _evaluate(surfaces[b], xb, 0)[:, 0]
            if np.max(np.linalg.norm(Xa - Xb, axis=1)) > 1e-8 * diameter:
                raise IntersectionTraceError(
                    f"intersection between patches {a} and {b} did not converge; specify it manually"
                )
            out.append(Intersection(a, b, xa, xb, classify(xa, xb), mortar_resolution))
    return out


def _boxes_overlap(sa, sb, tol):
    # convex-hull property: the surface lies inside its control point box
    A, B = sa.flat_points(), sb.flat_points()
    return bool(np.all(A.min(axis=0) <= B.max(axis=0) + tol) and np.all(B.min(axis=0) <= A.max(axis=0) + tol))
