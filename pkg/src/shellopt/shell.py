"""Isogeometric Kirchhoff-Love shell kernel (St. Venant-Kirchhoff material).

Element quantities are written once as a scalar potential per quadrature
point in JAX. The residual is its gradient with respect to the displacement
coefficients; stiffness and the geometric partial dR/dP are forward-mode
Jacobians of that residual. Everything is evaluated directly in spline
coefficient space.

Energy convention: the stored energy is 1/2 * int(n:eps + m:kappa) dS so
that its gradient is the standard residual.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial

import numpy as np
import scipy.sparse as sp

from ._jax import jax, jnp
from .errors import SingularGeometryError
from .splines import NurbsSurface, surface_basis

CHUNK = 16
SIDES = {"u0": (0, 0), "u1": (0, 1), "v0": (1, 0), "v1": (1, 1)}


@dataclass(frozen=True)
class Material:
    E: float
    nu: float

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError("E must be positive")
        if not 0.0 <= self.nu < 0.5:
            raise ValueError("Poisson ratio must be in [0, 0.5)")


@dataclass(frozen=True)
class LoadCase:
    """Distributed load per unit reference area.

    kind
        ``dead``: constant force ``magnitude * direction``.
        ``projected``: force ``-magnitude * (A3 . e) e`` with ``e = direction``,
        i.e. ``magnitude`` per unit area projected on the plane normal to e.
        ``normal``: pressure ``magnitude`` along the surface normal.
    follower
        Use the deformed normal instead of the reference one (projected and
        normal kinds). Follower loads make the tangent non-symmetric.
    """

    kind: str
    magnitude: float
    direction: tuple = (0.0, 0.0, -1.0)
    follower: bool = False

    def __post_init__(self):
        if self.kind not in ("dead", "projected", "normal"):
            raise ValueError(f"unknown load kind {self.kind!r}")
        if not np.isfinite(self.magnitude):
            raise ValueError("load magnitude must be finite")


def load_vector(loads) -> np.ndarray:
    """Pack load cases into
    [dead(3), p_proj, e(3), p_normal, p_normal_follower, p_proj_follower]."""
    out = np.zeros(10)
    for lc in loads:
        e = np.asarray(lc.direction, dtype=float)
        if lc.kind == "dead":
            out[:3] += lc.magnitude * e
        elif lc.kind == "projected":
            e = e / np.linalg.norm(e)
            if (out[3] != 0.0 or out[9] != 0.0) and not np.allclose(out[4:7], e):
                raise ValueError("only one projected-load direction per patch")
            out[4:7] = e
            out[9 if lc.follower else 3] += lc.magnitude
        elif lc.follower:
            out[8] += lc.magnitude
        else:
            out[7] += lc.magnitude
    return out


def boundary_dofs(surface: NurbsSurface, side: str, rows: int = 1, components=(0, 1, 2)):
    """Local dof indices of the first ``rows`` control-point rows at a side.

    rows=1 fixes displacements (pinned); rows=2 also fixes the rotation
    (clamped).
    """
    nu, nv = surface.shape
    axis, end = SIDES[side]
    cps = []
    for r in range(rows):
        if axis == 0:
            i = r if end == 0 else nu - 1 - r
            cps += [i * nv + j for j in range(nv)]
        else:
            j = r if end == 0 else nv - 1 - r
            cps += [i * nv + j for i in range(nu)]
    return sorted(3 * c + k for c in cps for k in components)


@dataclass(eq=False)
class ShellPatch:
    surface: NurbsSurface
    thickness: float
    material: Material
    loads: list = field(default_factory=list)
    fixed_dofs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        if not self.thickness > 0:
            raise ValueError("thickness must be positive")
        self.fixed_dofs = np.unique(np.asarray(self.fixed_dofs, dtype=int))

    @property
    def ndof(self):
        return 3 * self.surface.ncp

    def fix(self, side, rows=1, components=(0, 1, 2)):
        new = boundary_dofs(self.surface, side, rows, components)
        self.fixed_dofs = np.unique(np.r_[self.fixed_dofs, new]).astype(int)
        self.__dict__.pop("_kernel", None)
        return self


@dataclass
class QuadRule:
    """Gauss points per element: ``points`` (nel, nq, 2), ``weights``
    (nel, nq) including the parametric element area."""

    points: np.ndarray
    weights: np.ndarray


def gauss_rule(surface: NurbsSurface, npts: int | None = None) -> QuadRule:
    if npts is None:
        npts = max(surface.degrees) + 1
    g, gw = np.polynomial.legendre.leggauss(npts)
    pts, wts = [], []
    for (u0, u1), (v0, v1) in surface.elements():
        uu = 0.5 * (u0 + u1) + 0.5 * (u1 - u0) * g
        vv = 0.5 * (v0 + v1) + 0.5 * (v1 - v0) * g
        U, V = np.meshgrid(uu, vv, indexing="ij")
        pts.append(np.stack([U.ravel(), V.ravel()], axis=1))
        wts.append(np.outer(gw, gw).ravel() * 0.25 * (u1 - u0) * (v1 - v0))
    return QuadRule(np.array(pts), np.array(wts))


# --- pointwise kinematics (JAX) -------------------------------------------


def _surface_forms(D):
    """Metric, curvature, unit normal and area element from (6, 3) partials
    [X, X_u, X_v, X_uu, X_uv, X_vv]."""
    a1, a2 = D[1], D[2]
    nrm = jnp.cross(a1, a2)
    J = jnp.sqrt(jnp.dot(nrm, nrm))
    a3 = nrm / J
    met = jnp.array([[a1 @ a1, a1 @ a2], [a1 @ a2, a2 @ a2]])
    curv = jnp.array([[D[3] @ a3, D[4] @ a3], [D[4] @ a3, D[5] @ a3]])
    return met, curv, a3, J


def _inv2(A):
    det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    return jnp.array([[A[1, 1], -A[0, 1]], [-A[1, 0], A[0, 0]]]) / det


def _material_contract(Ainv, S, E, nu):
    """C^{abcd} S_cd for the plane-stress SVK tensor in curvilinear form."""
    return E / (1.0 - nu**2) * (nu * Ainv * jnp.trace(Ainv @ S) + (1.0 - nu) * Ainv @ S @ Ainv)


def _kinematics(Dref, Ddef):
    A, B, A3, J = _surface_forms(Dref)
    a, b, a3, j = _surface_forms(Ddef)
    return dict(
        A_metric=A, a_metric=a, B_curv=B, b_curv=b, A3=A3, a3=a3, J=J,
        eps=0.5 * (a - A), kappa=B - b,
    )


def _strain_changes(D, U, A3, J):
    """Membrane strain 0.5 (a - A) and curvature change B - b written in the
    displacement derivatives, so small displacements lose no digits to
    cancellation."""
    A1, A2, U1, U2 = D[1], D[2], U[1], U[2]
    g = jnp.array([[A1 @ U1, A1 @ U2], [A2 @ U1, A2 @ U2]])
    uu = jnp.array([[U1 @ U1, U1 @ U2], [U2 @ U1, U2 @ U2]])
    eps = 0.5 * (g + g.T + uu)
    N = J * A3
    dN = jnp.cross(A1, U2) + jnp.cross(U1, A2) + jnp.cross(U1, U2)
    j = jnp.sqrt(jnp.dot(N + dN, N + dN))
    # a3 - A3 = dN / j + N (J - j) / (j J), with J - j = (J^2 - j^2) / (J + j)
    dJ = -(2.0 * (N @ dN) + dN @ dN) / (J + j)
    da3 = dN / j + N * dJ / (j * J)
    a3 = A3 + da3
    X2 = jnp.array([[D[3], D[4]], [D[4], D[5]]])
    U2d = jnp.array([[U[3], U[4]], [U[4], U[5]]])
    kap = -(X2 @ da3 + U2d @ a3)
    return eps, kap


def _qp_internal(Bq, P, d, mat):
    E, nu, t = mat[0], mat[1], mat[2]
    Dref = Bq @ P
    U = Bq @ d
    A, _, A3, J = _surface_forms(Dref)
    eps, kap = _strain_changes(Dref, U, A3, J)
    Ainv = _inv2(A)
    n = t * _material_contract(Ainv, eps, E, nu)
    m = t**3 / 12.0 * _material_contract(Ainv, kap, E, nu)
    return 0.5 * (jnp.sum(n * eps) + jnp.sum(m * kap)) * J, Dref, A3, J


def _qp_potential(Bq, P, d, mat, loads):
    w_int, Dref, A3, J = _qp_internal(Bq, P, d, mat)
    u = Bq[0] @ d
    e = loads[4:7]
    f = loads[:3] - loads[3] * jnp.dot(A3, e) * e + loads[7] * A3
    return w_int - jnp.dot(f, u) * J


def _element_internal(Be, we, P, d, mat):
    vals = jax.vmap(lambda Bq: _qp_internal(Bq, P, d, mat)[0])(Be)
    return jnp.sum(vals * we)


def _element_potential(Be, we, P, d, mat, loads):
    vals = jax.vmap(lambda Bq: _qp_potential(Bq, P, d, mat, loads))(Be)
    return jnp.sum(vals * we)


def _element_follower(Be, we, P, d, loads):
    def one(Bq):
        Dd = Bq @ (P + d)
        n = jnp.cross(Dd[1], Dd[2])
        e = loads[4:7]
        f = loads[8] * n - loads[9] * jnp.dot(n, e) * e
        return jnp.outer(Bq[0], f)

    return jnp.einsum("q,qac->ac", we, jax.vmap(one)(Be))


def _element_residual(Be, we, P, d, mat, loads):
    g = jax.grad(_element_potential, argnums=3)(Be, we, P, d, mat, loads)
    return g - _element_follower(Be, we, P, d, loads)


def _element_all(Be, we, P, d, mat, loads):
    r = _element_residual(Be, we, P, d, mat, loads)
    K = jax.jacfwd(_element_residual, argnums=3)(Be, we, P, d, mat, loads)
    G = jax.jacfwd(_element_residual, argnums=2)(Be, we, P, d, mat, loads)
    return r, K, G


def _element_area(Be, we, P):
    def one(Bq):
        D = Bq @ P
        return jnp.linalg.norm(jnp.cross(D[1], D[2]))

    return jnp.sum(jax.vmap(one)(Be) * we)


def _element_min_jac(Be, P):
    def one(Bq):
        D = Bq @ P
        return jnp.linalg.norm(jnp.cross(D[1], D[2]))

    return jnp.min(jax.vmap(one)(Be))


_V = partial(jax.vmap, in_axes=(0, 0, 0, 0, None, None))
_batch_residual = jax.jit(_V(_element_residual))
_batch_all = jax.jit(_V(_element_all))
_batch_internal = jax.jit(jax.vmap(_element_internal, in_axes=(0, 0, 0, 0, None)))
_batch_internal_grads = jax.jit(
    jax.vmap(jax.grad(_element_internal, argnums=(2, 3)), in_axes=(0, 0, 0, 0, None))
)
_batch_potential = jax.jit(_V(_element_potential))
_batch_area = jax.jit(jax.vmap(_element_area, in_axes=(0, 0, 0)))
_batch_area_grad = jax.jit(jax.vmap(jax.grad(_element_area, argnums=2), in_axes=(0, 0, 0)))
_batch_min_jac = jax.jit(jax.vmap(_element_min_jac, in_axes=(0, 0)))
_point_kinematics = jax.jit(_kinematics)


# --- public pointwise operations --------------------------------------------


def kinematics(geom_derivs, disp_derivs) -> dict:
    """Reference/deformed surface quantities at a point.

    Both inputs are (6, 3): value, d/du, d/dv, d2/du2, d2/dudv, d2/dv2 of X
    and of u. Returns metric, curvature, normals, membrane strain ``eps``
    and curvature change ``kappa`` as numpy arrays.
    """
    Dr = np.asarray(geom_derivs, dtype=float)
    Du = np.asarray(disp_derivs, dtype=float)
    J = np.linalg.norm(np.cross(Dr[1], Dr[2]))
    if not J > 1e-14 * max(np.linalg.norm(Dr[1]) * np.linalg.norm(Dr[2]), 1e-300):
        raise SingularGeometryError("degenerate surface metric")
    out = _point_kinematics(jnp.asarray(Dr), jnp.asarray(Dr + Du))
    return {k: np.asarray(v) for k, v in out.items()}


def material_matrix(material: Material, metric) -> np.ndarray:
    """3x3 Voigt matrix of the contravariant SVK tensor for strains ordered
    (e11, e22, 2 e12)."""
    Ai = np.linalg.inv(np.asarray(metric, dtype=float))
    E, nu = material.E, material.nu
    c = E / (1 - nu**2)

    def C(a, b, g, d):
        return c * (nu * Ai[a, b] * Ai[g, d] + 0.5 * (1 - nu) * (Ai[a, g] * Ai[b, d] + Ai[a, d] * Ai[b, g]))

    idx = [(0, 0), (1, 1), (0, 1)]
    return np.array([[C(*i, *j) for j in idx] for i in idx])


def constitutive(material: Material, thickness: float, eps, kappa, metric=np.eye(2)):
    """Normal forces and moments (Voigt, n11 n22 n12) from Voigt strains
    (e11, e22, 2 e12) and curvature changes (k11, k22, 2 k12)."""
    C = material_matrix(material, metric)
    n = thickness * C @ np.asarray(eps, dtype=float)
    m = thickness**3 / 12.0 * C @ np.asarray(kappa, dtype=float)
    return n, m


# --- patch kernel ---------------------------------------------------------


class ShellKernel:
    """Quadrature data and batched element evaluation for one patch.

    The parametric data (basis values at Gauss points) depend only on knots
    and weights, so the same kernel serves every geometry update of the
    control points.
    """

    def __init__(self, patch: ShellPatch, npts: int | None = None):
        self.patch = patch
        s = patch.surface
        self.rule = gauss_rule(s, npts)
        nel, nq, _ = self.rule.points.shape
        idx, R = surface_basis(s, self.rule.points.reshape(-1, 2), 2)
        nloc = idx.shape[1]
        idx = idx.reshape(nel, nq, nloc)
        # local support is identical for all Gauss points of an element
        self.conn = idx[:, 0, :]
        self.nel, self.nloc = nel, nloc
        # fixed-size element chunks keep one compiled kernel per degree
        nchunk = -(-nel // CHUNK)
        pad = np.r_[np.arange(nel), np.zeros(nchunk * CHUNK - nel, dtype=int)]
        B = R.reshape(nel, nq, 6, nloc)[pad]
        w = self.rule.weights[pad] * (np.arange(len(pad)) < nel)[:, None]
        self._pad = pad
        self.Bc = [jnp.asarray(B[c * CHUNK:(c + 1) * CHUNK]) for c in range(nchunk)]
        self.wc = [jnp.asarray(w[c * CHUNK:(c + 1) * CHUNK]) for c in range(nchunk)]
        self.ncp = s.ncp
        self.ndof = 3 * s.ncp
        self.edofs = (3 * self.conn[:, :, None] + np.arange(3)).reshape(nel, -1)
        self.mat = jnp.array([patch.material.E, patch.material.nu, patch.thickness])
        self.loads = jnp.asarray(load_vector(patch.loads))
        self.mask = np.ones(self.ndof)
        self.mask[patch.fixed_dofs] = 0.0
        ne = self.edofs.shape[1]
        self._rows = np.repeat(self.edofs, ne, axis=1).ravel()
        self._cols = np.tile(self.edofs, (1, ne)).ravel()

    # helpers
    def _P(self, P):
        if P is None:
            P = self.patch.surface.flat_points()
        return np.asarray(P, dtype=float).reshape(self.ncp, 3)

    def _gather(self, X):
        return np.asarray(X, dtype=float).reshape(self.ncp, 3)[self.conn[self._pad]]

    def _run(self, fn, per_element, *shared):
        """Apply a batched element function chunk by chunk."""
        outs = []
        for c, (B, w) in enumerate(zip(self.Bc, self.wc)):
            sl = slice(c * CHUNK, (c + 1) * CHUNK)
            outs.append(fn(B, w, *[x[sl] for x in per_element], *shared))
        return jax.tree_util.tree_map(
            lambda *a: np.concatenate([np.asarray(x) for x in a])[: self.nel], *outs
        )

    def _scatter_vec(self, ve):
        out = np.zeros(self.ndof)
        np.add.at(out, self.edofs.ravel(), np.asarray(ve).reshape(-1))
        return out

    def _scatter_mat(self, me):
        return sp.csr_matrix(
            (np.asarray(me).reshape(-1), (self._rows, self._cols)), shape=(self.ndof, self.ndof)
        )

    def check_geometry(self, P=None):
        jmin = self._run(lambda B, w, Pe: _batch_min_jac(B, Pe), [self._gather(self._P(P))])
        scale = max(np.max(np.abs(jmin)), 1e-300)
        bad = np.where(~(jmin > 1e-12 * scale))[0]
        if len(bad):
            raise SingularGeometryError(
                f"degenerate metric in element {int(bad[0])}", element=int(bad[0])
            )

    # raw (no boundary conditions) quantities; d is used as given
    def raw_residual(self, P, d):
        r = self._run(_batch_residual, [self._gather(P), self._gather(d)], self.mat, self.loads)
        return self._scatter_vec(r)

    def raw_tangents(self, P, d):
        r, K, G = self._run(_batch_all, [self._gather(P), self._gather(d)], self.mat, self.loads)
        return self._scatter_vec(r), self._scatter_mat(K), self._scatter_mat(G)

    def potential(self, d, P=None):
        P = self._P(P)
        d = np.asarray(d, dtype=float) * self.mask
        e = self._run(_batch_potential, [self._gather(P), self._gather(d)], self.mat, self.loads)
        return float(np.sum(np.asarray(e)))

    # boundary conditions: R = M grad W(M d) + (I - M) d
    def apply_bcs(self, d, R, K=None, G=None):
        m = self.mask
        R = m * R + (1 - m) * np.asarray(d, dtype=float)
        out = [R]
        if K is not None:
            Mk = sp.diags(m)
            out.append((Mk @ K @ Mk + sp.diags(1 - m)).tocsr())
        if G is not None:
            out.append((sp.diags(m) @ G).tocsr())
        return out[0] if len(out) == 1 else tuple(out)

    def residual(self, d, P=None):
        P = self._P(P)
        dm = np.asarray(d, dtype=float) * self.mask
        return self.apply_bcs(d, self.raw_residual(P, dm))

    def tangents(self, d, P=None):
        """(R, K, dR/dP) with boundary conditions applied."""
        P = self._P(P)
        self.check_geometry(P)
        dm = np.asarray(d, dtype=float) * self.mask
        R, K, G = self.raw_tangents(P, dm)
        return self.apply_bcs(d, R, K, G)

    def internal_energy(self, d, P=None):
        P = self._P(P)
        dm = np.asarray(d, dtype=float) * self.mask
        e = self._run(_batch_internal, [self._gather(P), self._gather(dm)], self.mat)
        return float(np.sum(np.asarray(e)))

    def internal_energy_grads(self, d, P=None):
        """(dW/dP, dW/dd) as flat vectors."""
        P = self._P(P)
        dm = np.asarray(d, dtype=float) * self.mask
        gP, gd = self._run(_batch_internal_grads, [self._gather(P), self._gather(dm)], self.mat)
        return self._scatter_vec(gP), self._scatter_vec(gd) * self.mask

    def element_areas(self, P=None):
        return self._run(_batch_area, [self._gather(self._P(P))])

    def area(self, P=None):
        return float(np.sum(self.element_areas(P)))

    def area_grad(self, P=None):
        return self._scatter_vec(self._run(_batch_area_grad, [self._gather(self._P(P))]))


def kernel_for(patch: ShellPatch) -> ShellKernel:
    k = patch.__dict__.get("_kernel")
    if k is None:
        k = ShellKernel(patch)
        patch.__dict__["_kernel"] = k
    return k


def internal_energy(patch: ShellPatch, d, P=None) -> float:
    """Stored energy 1/2 int(n:eps + m:kappa) dS of one patch [J]."""
    return kernel_for(patch).internal_energy(d, P)


def residual(patch: ShellPatch, d, P=None) -> np.ndarray:
    return kernel_for(patch).residual(d, P)


def stiffness(patch: ShellPatch, d, P=None) -> sp.csr_matrix:
    return kernel_for(patch).tangents(d, P)[1]


def d_residual_d_cp(patch: ShellPatch, d, P=None) -> sp.csr_matrix:
    return kernel_for(patch).tangents(d, P)[2]
