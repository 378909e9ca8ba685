"""Multi-patch models, Lagrange extraction and free-form deformation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import EmbeddingError, InfeasibleConstraintError, SingularFitError
from .splines import FfdBlock, KnotVector, NurbsSurface, greville_points, surface_basis_matrix, volume_basis_matrix


@dataclass(eq=False)
class MultiPatchModel:
    """Ordered shell patches plus the intersections coupling them."""

    patches: list
    intersections: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.patches)
        for it in self.intersections:
            if not (0 <= it.patch_a < n and 0 <= it.patch_b < n) or it.patch_a == it.patch_b:
                raise ValueError(f"intersection references invalid patches ({it.patch_a}, {it.patch_b})")

    @property
    def surfaces(self):
        return [p.surface for p in self.patches]

    @property
    def offsets(self):
        """Start of each patch's block in the global dof/control-point vector."""
        return np.cumsum([0] + [p.ndof for p in self.patches])

    @property
    def ndof(self):
        return int(self.offsets[-1])

    def flat_points(self):
        return np.concatenate([p.surface.flat_points().ravel() for p in self.patches])

    def split(self, vec):
        o = self.offsets
        return [np.asarray(vec)[o[i]:o[i + 1]] for i in range(len(self.patches))]

    def diameter(self):
        P = self.flat_points().reshape(-1, 3)
        return float(np.linalg.norm(P.max(axis=0) - P.min(axis=0)))


# --- Lagrange extraction ---------------------------------------------------


def _nodes_1d(kv: KnotVector):
    p = kv.degree
    b = kv.breaks
    t = np.linspace(0.0, 1.0, p + 1)
    return np.concatenate([b[:1]] + [b[e] + (b[e + 1] - b[e]) * t[1:] for e in range(len(b) - 1)])


def lagrange_nodes(surface: NurbsSurface):
    """Equispaced per-element nodes of the patch degree, shared nodes merged.

    Returns ``nodes`` (n_L, 2) and ``conn`` (nel, (p+1)(q+1)). Numbering
    follows elements in order, then local nodes in order, first seen first.
    """
    p, q = surface.knots_u.degree, surface.knots_v.degree
    gu, gv = _nodes_1d(surface.knots_u), _nodes_1d(surface.knots_v)
    neu, nev = surface.knots_u.nel, surface.knots_v.nel
    ids = -np.ones((len(gu), len(gv)), dtype=int)
    order, conn = [], []
    for eu in range(neu):
        for ev in range(nev):
            loc = []
            for a in range(p + 1):
                for b in range(q + 1):
                    i, j = eu * p + a, ev * q + b
                    if ids[i, j] < 0:
                        ids[i, j] = len(order)
                        order.append((i, j))
                    loc.append(ids[i, j])
            conn.append(loc)
    order = np.array(order)
    nodes = np.stack([gu[order[:, 0]], gv[order[:, 1]]], axis=1)
    return nodes, np.array(conn)


def build_extraction(surface: NurbsSurface, nodes=None) -> sp.csr_matrix:
    """M with M_ij = R_j(xi_i), so that M @ P gives the nodal positions."""
    if nodes is None:
        nodes = lagrange_nodes(surface)[0]
    return surface_basis_matrix(surface, nodes, 0)


class LeastSquaresFit:
    """Normal-equation solver for M P = P_L (Cholesky of M^T M).

    The fitted control points satisfy the implicit residual
    M^T (M P - P_L) = 0, whose partials are M^T M and -M^T.
    """

    def __init__(self, M):
        self.M = sp.csr_matrix(M)
        MtM = (self.M.T @ self.M).toarray()
        try:
            self._cho = sla.cho_factor(MtM)
        except np.linalg.LinAlgError as exc:
            raise SingularFitError("extraction matrix is rank deficient") from exc
        d = np.diag(self._cho[0])
        if d.min() <= 1e-10 * d.max():
            raise SingularFitError("extraction matrix is numerically rank deficient")
        self.MtM = sp.csr_matrix(MtM)

    def solve(self, PL):
        PL = np.asarray(PL, dtype=float)
        return sla.cho_solve(self._cho, self.M.T @ PL)

    def solve_normal(self, rhs):
        return sla.cho_solve(self._cho, rhs)


def fit_control_points(M, PL):
    """Least-squares control points for nodal positions ``PL`` (n_L, 3)."""
    return LeastSquaresFit(M).solve(PL)


# --- FFD -------------------------------------------------------------------


def make_ffd_block(nel, degree: int, bounds) -> FfdBlock:
    """Uniform B-spline block whose Greville lattice spans ``bounds``.

    ``bounds`` is (3, 2): [min, max] per axis. The geometric map is the
    identity on the box.
    """
    bounds = np.asarray(bounds, dtype=float)
    if bounds.shape != (3, 2) or np.any(bounds[:, 1] - bounds[:, 0] <= 0):
        raise ValueError("FFD bounds must be a non-degenerate (3, 2) box")
    if any(int(n) < 1 for n in nel):
        raise ValueError("FFD block needs at least one element per direction")
    kvs = [KnotVector.uniform(degree, int(n)) for n in nel]
    g = [bounds[a, 0] + (bounds[a, 1] - bounds[a, 0]) * greville_points(kv) for a, kv in enumerate(kvs)]
    cp = np.stack(np.meshgrid(*g, indexing="ij"), axis=-1)
    return FfdBlock(*kvs, cp, bounds=bounds)


def padded_bounds(points, pad_fields=(), pad=0.2, margin=1e-6):
    """Bounding box of ``points`` with the upper limit of the listed axes
    raised by ``pad`` times their range; degenerate axes get a unit margin
    relative to the overall size."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    lo, hi = P.min(axis=0), P.max(axis=0)
    size = max(np.max(hi - lo), 1.0)
    for a in range(3):
        if hi[a] - lo[a] < 1e-9 * size:
            lo[a] -= 0.5 * size * 0.1
            hi[a] += 0.5 * size * 0.1
    for a in pad_fields:
        hi[a] += pad * (hi[a] - lo[a])
    ext = hi - lo
    return np.stack([lo - margin * ext, hi + margin * ext], axis=1)


def embed_points(block: FfdBlock, points, label="point"):
    """Parametric coordinates of physical points in the (identity) block."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    lo, hi = block.bounds[:, 0], block.bounds[:, 1]
    xi = (P - lo) / (hi - lo)
    tol = 1e-9
    bad = np.where(np.any((xi < -tol) | (xi > 1 + tol), axis=1))[0]
    if len(bad):
        raise EmbeddingError(f"{label} {int(bad[0])} at {P[bad[0]]} lies outside the FFD block")
    return np.clip(xi, 0.0, 1.0)


def build_ffd_matrix(block: FfdBlock, params) -> sp.csr_matrix:
    """A with A_ij = N_j(params_i); A @ lattice gives embedded positions."""
    return volume_basis_matrix(block, params)


@dataclass
class FfdSpec:
    """Design constraints on an FFD lattice, per optimized field.

    fields
        Coordinates (0, 1, 2) whose lattice values are design variables.
    align
        Lattice directions along which each field's points move together.
    pins
        Each pin is ``(dir0, sides0, dir1, sides1)``: lattice points whose
        index along ``dir0`` is at one of ``sides0`` (0 first, 1 last), and
        if ``dir1`` is not None also along ``dir1``, keep their initial value
        in every optimized field.
    regu
        Keep lattice coordinates monotone along their own axis,
        ``P_{k+1} - P_k >= regu_delta``.
    rigid
        Lattice directions along which each field's points translate
        together (equal increments). Unlike ``align`` the points may start
        at different values, e.g. across the thickness of a block around a
        flat patch.
    """

    fields: tuple = (2,)
    align: tuple = ()
    pins: tuple = ()
    regu: bool = False
    regu_delta: float = 0.0
    rigid: tuple = ()


def _lattice_index(shape):
    return np.arange(int(np.prod(shape))).reshape(shape)


def _pinned_points(shape, pin):
    dir0, sides0, dir1, sides1 = pin
    idx = _lattice_index(shape)
    mask = np.zeros(shape, dtype=bool)
    for s0 in sides0:
        i0 = 0 if s0 == 0 else shape[dir0] - 1
        sl = [slice(None)] * 3
        sl[dir0] = i0
        if dir1 is None:
            mask[tuple(sl)] = True
        else:
            for s1 in sides1:
                sl2 = list(sl)
                sl2[dir1] = 0 if s1 == 0 else shape[dir1] - 1
                mask[tuple(sl2)] = True
    return np.sort(idx[mask])


@dataclass
class FieldMap:
    """Affine parameterization of one lattice field: values = T @ x + c."""

    field: int
    T: sp.csr_matrix
    c: np.ndarray
    x0: np.ndarray


def ffd_constraints(block: FfdBlock, spec: FfdSpec):
    """Linear constraint systems on the full lattice fields.

    Returns ``(Aeq, beq, Ain, bin)`` acting on the stacked optimized fields
    (field-major, lattice row-major), with ``Aeq v = beq`` and
    ``Ain v >= bin``.
    """
    shape = block.shape
    n = block.ncp
    P0 = block.flat_points()
    idx = _lattice_index(shape)
    nf = len(spec.fields)
    eq_rows, beq, in_rows, bin_ = [], [], [], []
    for k, f in enumerate(spec.fields):
        off = k * n
        for d in spec.align:
            a = np.moveaxis(idx, d, -1).reshape(-1, shape[d])
            for line in a:
                for j in range(1, len(line)):
                    eq_rows.append({off + line[0]: 1.0, off + line[j]: -1.0})
                    beq.append(0.0)
        for d in spec.rigid:
            a = np.moveaxis(idx, d, -1).reshape(-1, shape[d])
            for line in a:
                for j in range(1, len(line)):
                    eq_rows.append({off + line[0]: 1.0, off + line[j]: -1.0})
                    beq.append(P0[line[0], f] - P0[line[j], f])
        for pin in spec.pins:
            for i in _pinned_points(shape, pin):
                eq_rows.append({off + i: 1.0})
                beq.append(P0[i, f])
        if spec.regu:
            a = np.moveaxis(idx, f, -1).reshape(-1, shape[f])
            for line in a:
                for j in range(len(line) - 1):
                    in_rows.append({off + line[j + 1]: 1.0, off + line[j]: -1.0})
                    bin_.append(spec.regu_delta)

    def to_mat(rows):
        m = sp.lil_matrix((len(rows), nf * n))
        for r, row in enumerate(rows):
            for c, v in row.items():
                m[r, c] = v
        return m.tocsr()

    return to_mat(eq_rows), np.array(beq), to_mat(in_rows), np.array(bin_)


def reduce_ffd_design(block: FfdBlock, spec: FfdSpec):
    """Eliminate align/rigid/pin equalities by grouping lattice points.

    Points of a group share one increment from their initial value, so the
    group's variable is the value of its first point. A group containing a
    pinned point is fixed. Returns one :class:`FieldMap` per field and the
    reduced inequality system ``(G, g)`` meaning ``G x + g >= 0`` on the
    concatenated free variables.
    """
    shape = block.shape
    n = block.ncp
    P0 = block.flat_points()
    idx = _lattice_index(shape)
    pinned = set()
    for pin in spec.pins:
        pinned.update(int(i) for i in _pinned_points(shape, pin))
    maps = []
    for f in spec.fields:
        scale = max(1.0, np.abs(P0).max())
        parent = np.arange(n)

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for d in spec.align:
            for line in np.moveaxis(idx, d, -1).reshape(-1, shape[d]):
                if np.ptp(P0[line, f]) > 1e-12 * scale:
                    raise InfeasibleConstraintError(f"aligned lattice points differ initially in field {f}")
                for j in line[1:]:
                    parent[find(j)] = find(line[0])
        for d in spec.rigid:
            for line in np.moveaxis(idx, d, -1).reshape(-1, shape[d]):
                for j in line[1:]:
                    parent[find(j)] = find(line[0])
        roots = np.array([find(i) for i in range(n)])
        fixed = {int(roots[i]) for i in pinned}
        free_roots = [r for r in np.unique(roots) if r not in fixed]
        col = {r: j for j, r in enumerate(free_roots)}
        rows, cols = [], []
        c = P0[:, f].copy()
        for i in range(n):
            r = roots[i]
            if r in col:
                rows.append(i)
                cols.append(col[r])
                c[i] = P0[i, f] - P0[r, f]
        T = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, len(free_roots)))
        x0 = np.array([P0[r, f] for r in free_roots])
        maps.append(FieldMap(f, T, c, x0))

    _, _, Ain, bin_ = ffd_constraints(block, spec)
    if Ain.shape[0] == 0:
        return maps, sp.csr_matrix((0, sum(m.T.shape[1] for m in maps))), np.zeros(0)
    Tall = sp.block_diag([m.T for m in maps]).tocsr()
    call = np.concatenate([m.c for m in maps])
    G = (Ain @ Tall).tocsr()
    g = Ain @ call - bin_
    keep = np.abs(G).sum(axis=1).A.ravel() > 0
    if np.any(g[~keep] < -1e-12):
        raise InfeasibleConstraintError("fixed lattice points violate the monotonicity constraint")
    G, g = G[keep], g[keep]
    # drop duplicate rows produced by alignment
    key = [tuple(np.round(np.r_[G[i].toarray().ravel(), g[i]], 14)) for i in range(G.shape[0])]
    _, first = np.unique(np.array(key), axis=0, return_index=True)
    first = np.sort(first)
    return maps, G[first], g[first]
