"""Penalty coupling of non-matching patches and moving intersections.

Every intersection is integrated on a quadrature mesh: the segments between
consecutive paired nodes, each sampled once at its parametric midpoint on
both sides and weighted by its reference arc length. The spline basis is
evaluated inside JAX with the knot span held fixed, so derivatives with
respect to the parametric node coordinates (up to second order) come from
automatic differentiation.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache, partial

import numpy as np
import scipy.sparse as sp

from ._jax import jax, jnp
from .errors import NonConvergenceError, SetupError, TangentialIntersectionError
from .intersections import DIFFERENTIABLE, Intersection
from .shell import kernel_for
from .splines import NurbsSurface, _spans


@dataclass(frozen=True)
class PenaltyParams:
    alpha_d: float
    alpha_r: float
    coefficient: float


def penalty_params(E, t, h, coefficient=1.0e3) -> PenaltyParams:
    """alpha_d = c E t / h and alpha_r = c E t^3 / h."""
    if not h > 0:
        raise ValueError("element size must be positive")
    return PenaltyParams(coefficient * E * t / h, coefficient * E * t**3 / h, coefficient)


# --- spline evaluation in JAX ---------------------------------------------------


def _basis_1d(knots, span, u, p):
    """Non-zero B-spline values N_{span-p..span}(u) (Cox-de Boor)."""
    N = [jnp.ones_like(u)]
    for j in range(1, p + 1):
        saved = 0.0
        new = []
        for r in range(j):
            right = knots[span + r + 1] - u
            left = u - knots[span + 1 - j + r]
            temp = N[r] / (right + left)
            new.append(saved + right * temp)
            saved = left * temp
        new.append(saved)
        N = new
    return jnp.stack(N)


def _rational(xi, side, degs):
    """Rational basis (nloc,) at xi for one side's local data."""
    ku, kv, su, sv, w = side
    Nu = _basis_1d(ku, su, xi[0], degs[0])
    Nv = _basis_1d(kv, sv, xi[1], degs[1])
    R = jnp.outer(Nu, Nv).ravel() * w
    return R / jnp.sum(R)


def _point(xi, side, degs, C):
    return _rational(xi, side, degs) @ C


@dataclass
class _SideData:
    """Host-side spline data of one patch for the JAX evaluators."""

    degs: tuple
    ku: np.ndarray
    kv: np.ndarray
    weights: np.ndarray
    nv: int
    ncp: int

    @classmethod
    def of(cls, s: NurbsSurface, pad: int = 0):
        ku = np.r_[s.knots_u.knots, np.full(pad, s.knots_u.knots[-1])]
        kv = np.r_[s.knots_v.knots, np.full(pad, s.knots_v.knots[-1])]
        return cls(s.degrees, ku, kv, s.weights.ravel(), s.shape[1], s.ncp)

    def locate(self, s: NurbsSurface, xi):
        """Spans and local control-point indices for parametric points."""
        xi = np.atleast_2d(xi)
        p, q = self.degs
        su = _spans(s.knots_u, np.clip(xi[:, 0], 0.0, 1.0))
        sv = _spans(s.knots_v, np.clip(xi[:, 1], 0.0, 1.0))
        a = (su - p)[:, None, None] + np.arange(p + 1)[None, :, None]
        b = (sv - q)[:, None, None] + np.arange(q + 1)[None, None, :]
        idx = (a * self.nv + b).reshape(len(xi), -1)
        return su, sv, idx


# --- per-sample penalty energy ---------------------------------------------------


def _unit(v):
    return v / jnp.linalg.norm(v)


def _unit_increment(v, dv):
    """unit(v + dv) - unit(v) without cancellation for small dv."""
    nv = jnp.linalg.norm(v)
    nw = jnp.linalg.norm(v + dv)
    dn = (2.0 * jnp.dot(v, dv) + jnp.dot(dv, dv)) / (nw + nv)
    return dv / nw - v * dn / (nw * nv)


def _sample_energy(z, Pz, x8, sa, sb, alphas, degs_a, degs_b, nla):
    """Penalty energy of one quadrature-mesh segment.

    z, Pz: stacked local displacement/control coefficients (nla+nlb, 3);
    x8: the segment's end nodes (xa0, xa1, xb0, xb1).
    The angle changes are formed from the displacement frames directly so
    that tiny rotations keep full relative precision.
    """
    xa0, xa1, xb0, xb1 = x8[0:2], x8[2:4], x8[4:6], x8[6:8]
    ma, mb = 0.5 * (xa0 + xa1), 0.5 * (xb0 + xb1)
    Pa, Pb, da, db = Pz[:nla], Pz[nla:], z[:nla], z[nla:]

    def frame(xi, side, degs, C):
        return jax.jacfwd(_point)(xi, side, degs, C)  # (3, 2)

    Ta, Tb = frame(ma, sa, degs_a, Pa), frame(mb, sb, degs_b, Pb)
    Ua, Ub = frame(ma, sa, degs_a, da), frame(mb, sb, degs_b, db)
    dxa = xa1 - xa0
    weight = jnp.linalg.norm(Ta @ dxa)

    def normal(T, U):
        n = jnp.cross(T[:, 0], T[:, 1])
        dn = jnp.cross(T[:, 0], U[:, 1]) + jnp.cross(U[:, 0], T[:, 1]) + jnp.cross(U[:, 0], U[:, 1])
        return _unit(n), _unit_increment(n, dn)

    na, dna = normal(Ta, Ua)
    nb, dnb = normal(Tb, Ub)
    t0, dt = _unit(Ta @ dxa), _unit_increment(Ta @ dxa, Ua @ dxa)
    # reference: sin = (na x nb) . t, cos = na . nb; deformed uses the deformed tangent
    cross0 = jnp.cross(na, nb)
    dcross = jnp.cross(dna, nb) + jnp.cross(na, dnb) + jnp.cross(dna, dnb)
    ds = jnp.dot(cross0, dt) + jnp.dot(dcross, t0 + dt)
    dc = jnp.dot(na, dnb) + jnp.dot(dna, nb) + jnp.dot(dna, dnb)
    gap = _point(ma, sa, degs_a, da) - _point(mb, sb, degs_b, db)
    return weight * (alphas[0] * jnp.dot(gap, gap) + alphas[1] * (ds**2 + dc**2))


@lru_cache(maxsize=None)
def _penalty_kernels(degs_a, degs_b, nla):
    f = partial(_sample_energy, degs_a=degs_a, degs_b=degs_b, nla=nla)

    def energy(z, Pz, x8, sa, sb, alphas, mask):
        return mask * f(z, Pz, x8, sa, sb, alphas)

    grad = jax.grad(energy, argnums=0)

    def all_terms(z, Pz, x8, sa, sb, alphas, mask):
        g = grad(z, Pz, x8, sa, sb, alphas, mask)
        H, Gp, Gx = jax.jacfwd(grad, argnums=(0, 1, 2))(z, Pz, x8, sa, sb, alphas, mask)
        return g, H, Gp, Gx

    def energy_grads(z, Pz, x8, sa, sb, alphas, mask):
        return jax.grad(energy, argnums=(0, 1, 2))(z, Pz, x8, sa, sb, alphas, mask)

    side_axes = (None, None, 0, 0, 0)
    axes = (0, 0, 0, side_axes, side_axes, None, 0)
    return (
        jax.jit(jax.vmap(energy, in_axes=axes)),
        jax.jit(jax.vmap(grad, in_axes=axes)),
        jax.jit(jax.vmap(all_terms, in_axes=axes)),
        jax.jit(jax.vmap(energy_grads, in_axes=axes)),
    )


SAMPLE_CHUNK = 32


def _padded(m):
    return max(1, -(-m // SAMPLE_CHUNK)) * SAMPLE_CHUNK


def _chunked(fn, args):
    """Evaluate a vmapped penalty kernel over fixed-size sample chunks."""
    z, Pz, x8, sa, sb, alphas, mask = args
    outs = []
    for c0 in range(0, len(mask), SAMPLE_CHUNK):
        sl = slice(c0, c0 + SAMPLE_CHUNK)
        outs.append(fn(z[sl], Pz[sl], x8[sl], sa[:2] + tuple(a[sl] for a in sa[2:]),
                       sb[:2] + tuple(a[sl] for a in sb[2:]), alphas, mask[sl]))
    return jax.tree_util.tree_map(lambda *a: np.concatenate([np.asarray(x) for x in a]), *outs)


# --- quadrature mesh ---------------------------------------------------------------


@dataclass
class QuadratureMesh:
    """Midpoint samples of one intersection for the current geometry."""

    intersection: int
    mid_a: np.ndarray
    mid_b: np.ndarray
    weights: np.ndarray
    idx_a: np.ndarray
    idx_b: np.ndarray


class CoupledProblem:
    """Global residual, stiffness and partials of a penalty-coupled model.

    Parameters
    ----------
    model : MultiPatchModel
    penalty_coefficient : float
        Dimensionless scale c of the penalty parameters.
    moving : bool
        Treat differentiable intersections as moving (their parametric
        nodes become state variables solved from the intersection residual).
    """

    def __init__(self, model, penalty_coefficient=1.0e3, moving=False):
        self.model = model
        self.coefficient = float(penalty_coefficient)
        self.surfaces = [p.surface for p in model.patches]
        self.kernels = [kernel_for(p) for p in model.patches]
        self.offsets = model.offsets
        self.ndof = model.ndof
        self.nP = self.ndof
        self.diameter = model.diameter()
        pad = 0
        self.sides = [_SideData.of(s, pad) for s in self.surfaces]
        mask = np.ones(self.ndof)
        for k, p in enumerate(model.patches):
            mask[self.offsets[k] + p.fixed_dofs] = 0.0
        self.mask = mask
        self.inters = list(model.intersections)
        self.moving = [bool(moving) and it.kind == DIFFERENTIABLE for it in self.inters]
        sizes = [4 * (it.nel + 1) if mv else 0 for it, mv in zip(self.inters, self.moving)]
        self.xi_offsets = np.cumsum([0] + sizes)
        self.nxi = int(self.xi_offsets[-1])
        self.xi_fixed = [np.r_[it.xi_a.ravel(), it.xi_b.ravel()] for it in self.inters]
        P0 = model.flat_points()
        self.alphas = [self._alphas(l, P0) for l in range(len(self.inters))]

    # -- bookkeeping
    def moving_indices(self):
        return [l for l, mv in enumerate(self.moving) if mv]

    def initial_xi(self):
        return np.concatenate([self.xi_fixed[l] for l in self.moving_indices()] or [np.zeros(0)])

    def _xi_of(self, l, xi):
        if self.moving[l] and xi is not None:
            return np.asarray(xi[self.xi_offsets[l]:self.xi_offsets[l + 1]])
        return self.xi_fixed[l]

    def _patch_P(self, P, k):
        o = self.offsets
        return np.asarray(P[o[k]:o[k + 1]]).reshape(-1, 3)

    def element_size(self, k, xi, P):
        """Physical size sqrt(area) of the spline elements containing xi."""
        s = self.surfaces[k]
        bu, bv = s.knots_u.breaks, s.knots_v.breaks
        iu = np.clip(np.searchsorted(bu, xi[:, 0], side="right") - 1, 0, len(bu) - 2)
        iv = np.clip(np.searchsorted(bv, xi[:, 1], side="right") - 1, 0, len(bv) - 2)
        areas = self.kernels[k].element_areas(P)
        el = iu * (len(bv) - 1) + iv
        return np.sqrt(areas[el])

    def _alphas(self, l, P):
        it = self.inters[l]
        pa, pb = self.model.patches[it.patch_a], self.model.patches[it.patch_b]
        xa, xb = it.xi_a, it.xi_b
        mid_a, mid_b = 0.5 * (xa[1:] + xa[:-1]), 0.5 * (xb[1:] + xb[:-1])
        h = max(
            self.element_size(it.patch_a, mid_a, self._patch_P(P, it.patch_a)).max(),
            self.element_size(it.patch_b, mid_b, self._patch_P(P, it.patch_b)).max(),
        )
        E = 0.5 * (pa.material.E + pb.material.E)
        t = 0.5 * (pa.thickness + pb.thickness)
        pp = penalty_params(E, t, h, self.coefficient)
        return np.array([pp.alpha_d, pp.alpha_r])

    # -- per-intersection sample data
    def _samples(self, l, P, d, xi):
        it = self.inters[l]
        x = self._xi_of(l, xi)
        n1 = it.nel + 1
        xa, xb = x[: 2 * n1].reshape(n1, 2), x[2 * n1:].reshape(n1, 2)
        ka, kb = it.patch_a, it.patch_b
        A, B = self.sides[ka], self.sides[kb]
        mid_a, mid_b = 0.5 * (xa[1:] + xa[:-1]), 0.5 * (xb[1:] + xb[:-1])
        sua, sva, ia = A.locate(self.surfaces[ka], mid_a)
        sub, svb, ib = B.locate(self.surfaces[kb], mid_b)
        m = it.nel
        nb = _padded(m)
        pad = np.r_[np.arange(m), np.zeros(nb - m, dtype=int)]
        mask = np.r_[np.ones(m), np.zeros(nb - m)]
        Pa, Pb = self._patch_P(P, ka), self._patch_P(P, kb)
        da, db = self._patch_P(d, ka), self._patch_P(d, kb)
        z = np.concatenate([da[ia], db[ib]], axis=1)[pad]
        Pz = np.concatenate([Pa[ia], Pb[ib]], axis=1)[pad]
        x8 = np.concatenate([xa[:-1], xa[1:], xb[:-1], xb[1:]], axis=1)[pad]
        sa = (A.ku, A.kv, sua[pad], sva[pad], A.weights[ia][pad])
        sb = (B.ku, B.kv, sub[pad], svb[pad], B.weights[ib][pad])
        # global indices
        dof_a = (self.offsets[ka] + 3 * ia[:, :, None] + np.arange(3)).reshape(m, -1)
        dof_b = (self.offsets[kb] + 3 * ib[:, :, None] + np.arange(3)).reshape(m, -1)
        dofs = np.concatenate([dof_a, dof_b], axis=1)
        xdofs = None
        if self.moving[l]:
            o = self.xi_offsets[l]
            j = np.arange(m)
            xdofs = o + np.stack(
                [2 * j, 2 * j + 1, 2 * j + 2, 2 * j + 3,
                 2 * n1 + 2 * j, 2 * n1 + 2 * j + 1, 2 * n1 + 2 * j + 2, 2 * n1 + 2 * j + 3], axis=1
            )
        kern = _penalty_kernels(A.degs, B.degs, ia.shape[1])
        args = (jnp.asarray(z), jnp.asarray(Pz), jnp.asarray(x8), sa, sb,
                jnp.asarray(self.alphas[l]), jnp.asarray(mask))
        return kern, args, m, dofs, xdofs

    # -- public API
    def quadrature_mesh(self, l, P, xi=None) -> QuadratureMesh:
        it = self.inters[l]
        x = self._xi_of(l, xi)
        n1 = it.nel + 1
        xa, xb = x[: 2 * n1].reshape(n1, 2), x[2 * n1:].reshape(n1, 2)
        mid_a, mid_b = 0.5 * (xa[1:] + xa[:-1]), 0.5 * (xb[1:] + xb[:-1])
        s = self.surfaces[it.patch_a].with_points(self._patch_P(P, it.patch_a).ravel())
        from .splines import surface_basis

        idx, R = surface_basis(s, mid_a, 1)
        D = np.einsum("mdl,mlc->mdc", R, s.flat_points()[idx])
        w = np.linalg.norm(D[:, 1] * (xa[1:, 0] - xa[:-1, 0])[:, None]
                           + D[:, 2] * (xa[1:, 1] - xa[:-1, 1])[:, None], axis=1)
        ib = self.sides[it.patch_b].locate(self.surfaces[it.patch_b], mid_b)[2]
        return QuadratureMesh(l, mid_a, mid_b, w, idx, ib)

    def penalty_energy(self, P, d, xi=None, which=None):
        total = 0.0
        for l in range(len(self.inters)) if which is None else which:
            kern, args, m, _, _ = self._samples(l, P, d, xi)
            total += float(np.sum(_chunked(kern[0], args)))
        return total

    def raw_residual(self, P, d, xi=None):
        """Unconstrained gradient of shell plus penalty energy."""
        R = np.zeros(self.ndof)
        for k, kern in enumerate(self.kernels):
            o = self.offsets
            R[o[k]:o[k + 1]] = kern.raw_residual(self._patch_P(P, k), self._patch_P(d, k))
        for l in range(len(self.inters)):
            kern, args, m, dofs, _ = self._samples(l, P, d, xi)
            g = _chunked(kern[1], args)[:m].reshape(m, -1)
            np.add.at(R, dofs.ravel(), g.ravel())
        return R

    def residual(self, P, d, xi=None):
        d = np.asarray(d, dtype=float)
        m = self.mask
        return m * self.raw_residual(P, m * d, xi) + (1 - m) * d

    def assemble(self, P, d, xi=None):
        """(R, K, dR/dP, dR/dxi) with boundary conditions applied."""
        d = np.asarray(d, dtype=float)
        m = self.mask
        dm = m * d
        R = np.zeros(self.ndof)
        Ks, Gs = [], []
        o = self.offsets
        for k, kern in enumerate(self.kernels):
            Pk = self._patch_P(P, k)
            kern.check_geometry(Pk)
            r, K, G = kern.raw_tangents(Pk, self._patch_P(dm, k))
            R[o[k]:o[k + 1]] = r
            Ks.append(K)
            Gs.append(G)
        K = sp.block_diag(Ks).tocoo()
        G = sp.block_diag(Gs).tocoo()
        rows, cols, vals = [K.row], [K.col], [K.data]
        grow, gcol, gval = [G.row], [G.col], [G.data]
        xrow, xcol, xval = [], [], []
        for l in range(len(self.inters)):
            kern, args, mm, dofs, xdofs = self._samples(l, P, dm, xi)
            g, H, Gp, Gx = (a[:mm] for a in _chunked(kern[2], args))
            nd = dofs.shape[1]
            np.add.at(R, dofs.ravel(), g.reshape(mm, -1).ravel())
            H = H.reshape(mm, nd, nd)
            Gp = Gp.reshape(mm, nd, nd)
            rr = np.repeat(dofs, nd, axis=1).ravel()
            cc = np.tile(dofs, (1, nd)).ravel()
            rows.append(rr)
            cols.append(cc)
            vals.append(H.ravel())
            grow.append(rr)
            gcol.append(cc)
            gval.append(Gp.ravel())
            if xdofs is not None:
                Gx = Gx.reshape(mm, nd, 8)
                xrow.append(np.repeat(dofs, 8, axis=1).ravel())
                xcol.append(np.tile(xdofs, (1, nd)).ravel())
                xval.append(Gx.ravel())
        n = self.ndof
        K = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
        G = sp.csr_matrix((np.concatenate(gval), (np.concatenate(grow), np.concatenate(gcol))), shape=(n, n))
        if xrow:
            Gx = sp.csr_matrix((np.concatenate(xval), (np.concatenate(xrow), np.concatenate(xcol))),
                               shape=(n, self.nxi))
        else:
            Gx = sp.csr_matrix((n, self.nxi))
        Md = sp.diags(m)
        R = m * R + (1 - m) * d
        K = (Md @ K @ Md + sp.diags(1 - m)).tocsr()
        return R, K, (Md @ G).tocsr(), (Md @ Gx).tocsr()

    def potential(self, P, d, xi=None):
        """Total potential (shell potentials plus penalty energy)."""
        d = self.mask * np.asarray(d, dtype=float)
        total = sum(kern.potential(self._patch_P(d, k).ravel(), self._patch_P(P, k).ravel())
                    for k, kern in enumerate(self.kernels))
        return total + self.penalty_energy(P, d, xi)

    def internal_energy(self, P, d):
        d = self.mask * np.asarray(d, dtype=float)
        return sum(kern.internal_energy(self._patch_P(d, k).ravel(), self._patch_P(P, k).ravel())
                   for k, kern in enumerate(self.kernels))

    def internal_energy_grads(self, P, d):
        d = self.mask * np.asarray(d, dtype=float)
        gP, gd = np.zeros(self.ndof), np.zeros(self.ndof)
        o = self.offsets
        for k, kern in enumerate(self.kernels):
            a, b = kern.internal_energy_grads(self._patch_P(d, k).ravel(), self._patch_P(P, k).ravel())
            gP[o[k]:o[k + 1]] = a
            gd[o[k]:o[k + 1]] = b
        return gP, gd * self.mask

    # -- moving intersections --------------------------------------------------------

    def _xi_system(self, l):
        it = self.inters[l]
        n1 = it.nel + 1
        A, B = self.sides[it.patch_a], self.sides[it.patch_b]
        pins = []
        for j, pin in zip((0, n1 - 1), it.end_pins):
            if pin is None:
                raise SetupError(f"intersection {l} has an end off every patch edge")
            side, c, val = pin
            pins.append((side * 2 * n1 + 2 * j + c, val))
        return _xi_residual_kernel(A.degs, B.degs, n1, tuple(pins))

    def _xi_args(self, l, P, xl):
        it = self.inters[l]
        n1 = it.nel + 1
        ka, kb = it.patch_a, it.patch_b
        A, B = self.sides[ka], self.sides[kb]
        xa, xb = xl[: 2 * n1].reshape(n1, 2), xl[2 * n1:].reshape(n1, 2)
        sua, sva, ia = A.locate(self.surfaces[ka], xa)
        sub, svb, ib = B.locate(self.surfaces[kb], xb)
        sa = (A.ku, A.kv, sua, sva, A.weights[ia])
        sb = (B.ku, B.kv, sub, svb, B.weights[ib])
        Pa, Pb = self._patch_P(P, ka), self._patch_P(P, kb)
        return (jnp.asarray(xl), jnp.asarray(Pa), jnp.asarray(Pb), jnp.asarray(ia), jnp.asarray(ib), sa, sb)

    def xi_residual(self, P, xi):
        out = []
        for l in self.moving_indices():
            xl = np.asarray(xi[self.xi_offsets[l]:self.xi_offsets[l + 1]])
            out.append(np.asarray(self._xi_system(l)[0](*self._xi_args(l, P, xl))))
        return np.concatenate(out) if out else np.zeros(0)

    def xi_partials(self, P, xi):
        """(dR_L/dP, dR_L/dxi) as sparse matrices over all moving
        intersections (block diagonal in xi)."""
        rows_P, blocks = [], []
        for l in self.moving_indices():
            xl = np.asarray(xi[self.xi_offsets[l]:self.xi_offsets[l + 1]])
            it = self.inters[l]
            Jx, JPa, JPb = (np.asarray(a) for a in self._xi_system(l)[1](*self._xi_args(l, P, xl)))
            blocks.append(sp.csr_matrix(Jx))
            m = Jx.shape[0]
            JP = sp.lil_matrix((m, self.nP))
            o = self.offsets
            JP[:, o[it.patch_a]:o[it.patch_a + 1]] = JPa.reshape(m, -1)
            JP[:, o[it.patch_b]:o[it.patch_b + 1]] = JPb.reshape(m, -1)
            rows_P.append(JP.tocsr())
        if not blocks:
            return sp.csr_matrix((0, self.nP)), sp.csr_matrix((0, 0))
        return sp.vstack(rows_P).tocsr(), sp.block_diag(blocks).tocsr()

    def solve_xi(self, P, xi0, tol=1e-10, max_iter=50):
        """Newton on the intersection residual with steps clamped to the
        unit square; returns the solved xi vector."""
        xi = np.array(xi0, dtype=float)
        for l in self.moving_indices():
            sl = slice(self.xi_offsets[l], self.xi_offsets[l + 1])
            xl = xi[sl].copy()
            res_fn, jac_fn = self._xi_system(l)
            history = []
            for it in range(max_iter + 1):
                args = self._xi_args(l, P, xl)
                R = np.asarray(res_fn(*args))
                nrm = np.linalg.norm(R)
                history.append(nrm)
                if nrm <= tol * self.diameter:
                    break
                if it == max_iter:
                    n1 = self.inters[l].nel + 1
                    blocks = {"coincidence": np.abs(R[: 3 * n1]).max(),
                              "spacing": np.abs(R[3 * n1:-2]).max() if len(R) > 3 * n1 + 2 else 0.0,
                              "end pins": np.abs(R[-2:]).max()}
                    worst = max(blocks, key=blocks.get)
                    raise NonConvergenceError(
                        f"intersection {l} did not converge; worst block '{worst}' = {blocks[worst]:.3e}",
                        history,
                    )
                J = np.asarray(jac_fn(*args)[0])
                try:
                    step = np.linalg.solve(J, -R)
                except np.linalg.LinAlgError as exc:
                    raise TangentialIntersectionError(f"singular intersection Jacobian (intersection {l})") from exc
                if not np.all(np.isfinite(step)):
                    raise TangentialIntersectionError(f"singular intersection Jacobian (intersection {l})")
                xl = np.clip(xl + step, 0.0, 1.0)
            xi[sl] = xl
        return xi

    def update_intersections(self, xi):
        """Write solved moving xi back into the intersection objects."""
        for l in self.moving_indices():
            it = self.inters[l]
            n1 = it.nel + 1
            x = np.asarray(xi[self.xi_offsets[l]:self.xi_offsets[l + 1]])
            it.xi_a = x[: 2 * n1].reshape(n1, 2).copy()
            it.xi_b = x[2 * n1:].reshape(n1, 2).copy()
            self.xi_fixed[l] = x.copy()


@lru_cache(maxsize=None)
def _xi_residual_kernel(degs_a, degs_b, n1, pins):
    def residual(x, Pa, Pb, ia, ib, sa, sb):
        xa, xb = x[: 2 * n1].reshape(n1, 2), x[2 * n1:].reshape(n1, 2)
        Xa = jax.vmap(lambda xi, ku, kv, su, sv, w, i: _point(xi, (ku, kv, su, sv, w), degs_a, Pa[i]),
                      in_axes=(0, None, None, 0, 0, 0, 0))(xa, *sa, ia)
        Xb = jax.vmap(lambda xi, ku, kv, su, sv, w, i: _point(xi, (ku, kv, su, sv, w), degs_b, Pb[i]),
                      in_axes=(0, None, None, 0, 0, 0, 0))(xb, *sb, ib)
        h = jnp.linalg.norm(Xa[1:] - Xa[:-1], axis=1)
        pin_res = jnp.stack([x[i] - v for i, v in pins])
        return jnp.concatenate([(Xa - Xb).ravel(), h[1:] - h[:-1], pin_res])

    jac = jax.jacfwd(residual, argnums=(0, 1, 2))
    return jax.jit(residual), jax.jit(jac)


def solve_xi(problem: CoupledProblem, P, xi0, **kw):
    return problem.solve_xi(P, xi0, **kw)


def xi_residual(problem: CoupledProblem, P, xi):
    return problem.xi_residual(P, xi)


def xi_partials(problem: CoupledProblem, P, xi):
    return problem.xi_partials(P, xi)


def assemble_nonmatching(problem: CoupledProblem, P, d, xi=None):
    R, K, _, _ = problem.assemble(P, d, xi)
    return R, K


def d_nonmatching_d_cp(problem: CoupledProblem, P, d, xi=None):
    return problem.assemble(P, d, xi)[2]


def d_nonmatching_d_xi(problem: CoupledProblem, P, d, xi=None):
    return problem.assemble(P, d, xi)[3]
