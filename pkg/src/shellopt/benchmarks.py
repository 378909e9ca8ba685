"""Geometry and problem documents for the arch, T-beam and tube benchmarks."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .io import geometry_document, write_json
from .splines import KnotVector, NurbsSurface, basis_matrix, eval_surface_points, greville_points

ARCH_SPAN = 10.0
ARCH_WIDTH = 3.0
ARCH_RISE = 3.0
ARCH_OPTIMAL_RISE = 5.4779
TBEAM_WIDTH = 2.0
TBEAM_LENGTH = 5.0
TUBE_RADIUS = 1.0
TUBE_LENGTH = 2.0


def interpolated_surface(func, p, q, nel):
    """B-spline patch interpolating ``func(u, v) -> (..., 3)`` at the
    Greville points; exact when func is polynomial of degree (p, q)."""
    ku, kv = KnotVector.uniform(p, nel[0]), KnotVector.uniform(q, nel[1])
    gu, gv = greville_points(ku), greville_points(kv)
    U, V = np.meshgrid(gu, gv, indexing="ij")
    X = np.asarray(func(U, V), dtype=float)
    Nu, Nv = basis_matrix(ku, gu).toarray(), basis_matrix(kv, gv).toarray()
    cp = np.einsum("ia,jb,abc->ijc", np.linalg.inv(Nu), np.linalg.inv(Nv), X)
    return NurbsSurface(ku, kv, cp)


# --- arch -----------------------------------------------------------------------


def arch_height(x, rise=ARCH_RISE, span=ARCH_SPAN):
    return 4.0 * rise * x * (span - x) / span**2


def arch_surfaces(nel=((3, 2), (4, 3), (3, 2), (4, 3)), p=3, rise=ARCH_RISE):
    """Four patches splitting the parabolic arch at quarter spans; adjacent
    patches have different element counts."""
    cuts = np.linspace(0.0, ARCH_SPAN, len(nel) + 1)
    out = []
    for k, ne in enumerate(nel):
        x0, x1 = cuts[k], cuts[k + 1]

        def f(u, v, x0=x0, x1=x1):
            x = x0 + (x1 - x0) * u
            return np.stack([x, ARCH_WIDTH * v, arch_height(x, rise)], axis=-1)

        out.append(interpolated_surface(f, p, p, ne))
    return out


def arch_problem(tol=1e-12, max_iter=1000):
    return {
        "version": 1,
        "name": "arch",
        "material": {"E": 1.0e12, "nu": 0.0},
        "thickness": 0.01,
        "loads": [{"kind": "projected", "magnitude": 1.0, "direction": [0.0, 0.0, 1.0]}],
        "boundary_conditions": [
            {"patch": 0, "side": "u0", "rows": 1},
            {"patch": 3, "side": "u1", "rows": 1},
        ],
        "penalty_coefficient": 1.0e3,
        "mortar_resolution": 2,
        "mode": "ffd",
        "ffd": [{
            "patches": [0, 1, 2, 3],
            "fields": [2],
            "nel": [4, 1, 1],
            "degree": 2,
            "pad": 0.2,
            "align": [1],
            "pins": [{"dir0": 2, "sides0": [0], "dir1": 1, "sides1": [0]}],
            "regu": True,
        }],
        "objective": {"kind": "internal_energy", "normalize": True},
        "optimizer": {"tol": tol, "max_iter": max_iter},
    }


# --- T-beam ---------------------------------------------------------------------

WEB_BOTTOM = -1.6
WEB_TOP = 0.4


def flange_height(x):
    return 0.3 * (1.0 - (x - 1.0) ** 2)


def tbeam_surfaces(nel_flange=(4, 6), nel_web=(4, 6), p=3, web_x=0.5):
    """Parabolic flange (x across, y along the beam) and a flat web at
    ``web_x`` whose top strip reaches above the flange."""
    flange = interpolated_surface(
        lambda u, v: np.stack([TBEAM_WIDTH * u, TBEAM_LENGTH * v, flange_height(TBEAM_WIDTH * u)], axis=-1),
        p, p, nel_flange)
    web = interpolated_surface(
        lambda u, v: np.stack([np.full_like(u, web_x), TBEAM_LENGTH * v,
                               WEB_BOTTOM + (WEB_TOP - WEB_BOTTOM) * u], axis=-1),
        p, p, nel_web)
    return [flange, web]


def tbeam_problem(tol=1e-9, max_iter=1000):
    lin = [0.0, 0.0, 1.0, 1.0]
    cub = [0.0] * 4 + [1.0] * 4
    return {
        "version": 1,
        "name": "tbeam",
        "material": {"E": 1.0e7, "nu": 0.0},
        "thickness": 0.1,
        "loads": [{"patches": [0], "kind": "projected", "magnitude": 1.0, "direction": [0.0, 0.0, 1.0]}],
        "boundary_conditions": [
            {"patch": 0, "side": "v0", "rows": 2},
            {"patch": 1, "side": "v0", "rows": 2},
        ],
        "penalty_coefficient": 1.0e3,
        "mortar_resolution": 2,
        "mode": "moving",
        "multilevel": [{
            "patch": 1,
            "fields": [0, 2],
            "degrees": [[3, 1], [1, 1]],
            "knots": [[cub, lin], [lin, lin]],
            "align": [[1], [1]],
            "lower": [0.05, [None, 0.35]],
            "upper": [TBEAM_WIDTH - 0.05, None],
        }],
        "constraints": [{"kind": "volume", "patches": [1], "type": "eq", "factor": 1.0}],
        "objective": {"kind": "internal_energy", "normalize": True},
        "optimizer": {"tol": tol, "max_iter": max_iter},
    }


# --- tube -----------------------------------------------------------------------

TUBE_OVERHANG = 0.3


def tube_surfaces(nel=(4, 3), p=3, overhang=TUBE_OVERHANG):
    """Quarter of a square tube (axis z) from two crossing pairs of patches.

    Patches 0, 1 lie on y = R and run from the symmetry plane x = 0 past the
    corner; patches 2, 3 lie on x = R and run from y = 0 past the corner.
    The pairs are split along the axis at L/2 and L/3 respectively.
    """
    R, L = TUBE_RADIUS, TUBE_LENGTH
    s = R + overhang
    out = []
    for z0, z1 in ((0.0, L / 2), (L / 2, L)):
        out.append(interpolated_surface(
            lambda u, v, z0=z0, z1=z1: np.stack([s * u, np.full_like(u, R), z0 + (z1 - z0) * v], axis=-1),
            p, p, nel))
    for z0, z1 in ((0.0, L / 3), (L / 3, L)):
        out.append(interpolated_surface(
            lambda u, v, z0=z0, z1=z1: np.stack([np.full_like(u, R), s * u, z0 + (z1 - z0) * v], axis=-1),
            p, p, nel))
    return out


def tube_problem(tol=1e-2, max_iter=200):
    # patches 0, 1 have their reference normal pointing inwards
    loads = [{"patches": [0, 1], "kind": "normal", "magnitude": -1.0},
             {"patches": [2, 3], "kind": "normal", "magnitude": 1.0}]
    bcs = [{"patch": k, "side": "u0", "rows": 1, "components": [0]} for k in (0, 1)]
    bcs += [{"patch": k, "side": "u0", "rows": 1, "components": [1]} for k in (2, 3)]
    bcs += [{"patch": k, "side": "v0", "rows": 1, "components": [2]} for k in (0, 2)]
    bcs += [{"patch": k, "side": "v1", "rows": 1, "components": [2]} for k in (1, 3)]
    # each block surrounds a flat pair of patches; translating its lattice
    # rigidly across the thickness leaves one planar design curve per block
    block = {"degree": 2, "fields": [0, 1], "pad": 0.0, "regu": True}
    return {
        "version": 1,
        "name": "tube",
        "material": {"E": 1.0e7, "nu": 0.0},
        "thickness": 0.05,
        "loads": loads,
        "boundary_conditions": bcs,
        "penalty_coefficient": 1.0e3,
        "mortar_resolution": 2,
        "mode": "combined",
        "ffd": [
            {**block, "nel": [4, 1, 1], "align": [2], "rigid": [1], "patches": [0, 1], "pins": [{"dir0": 0, "sides0": [0]}]},
            {**block, "nel": [1, 4, 1], "align": [2], "rigid": [0], "patches": [2, 3], "pins": [{"dir0": 1, "sides0": [0]}]},
        ],
        "objective": {"kind": "internal_energy", "normalize": True},
        "optimizer": {"tol": tol, "max_iter": max_iter},
    }


def circle_fit(xy):
    """Least-squares circle through 2-D points: (center, radius).

    Algebraic fit refined by Gauss-Newton on the geometric distances.
    """
    xy = np.asarray(xy, dtype=float)
    A = np.c_[2 * xy, np.ones(len(xy))]
    sol = np.linalg.lstsq(A, (xy**2).sum(axis=1), rcond=None)[0]
    c = sol[:2]
    r = np.sqrt(sol[2] + c @ c)
    for _ in range(50):
        dv = xy - c
        dist = np.linalg.norm(dv, axis=1)
        J = np.c_[-dv / dist[:, None], -np.ones(len(xy))]
        step = np.linalg.lstsq(J, -(dist - r), rcond=None)[0]
        c, r = c + step[:2], r + step[2]
        if np.linalg.norm(step) <= 1e-14 * r:
            break
    return c, float(r)


def tube_section(surfaces, coupled, xi, z, n=41):
    """Points of the quarter cross-section at height ``z``.

    Each side runs from its symmetry plane (u = 0) to the intersection with
    the other pair at that height.
    """
    upper = [k for k in (0, 1) if _z_range(surfaces[k])[0] <= z <= _z_range(surfaces[k])[1]][0]
    lower = [k for k in (2, 3) if _z_range(surfaces[k])[0] <= z <= _z_range(surfaces[k])[1]][0]
    ua = ub = 1.0
    for l, it in enumerate(coupled.inters):
        if {it.patch_a, it.patch_b} != {upper, lower}:
            continue
        x = coupled._xi_of(l, xi)
        n1 = len(x) // 4
        xa, xb = x[: 2 * n1].reshape(n1, 2), x[2 * n1:].reshape(n1, 2)
        if it.patch_a != upper:
            xa, xb = xb, xa
        za = eval_surface_points(surfaces[upper], xa)[:, 2]
        order = np.argsort(za)
        ua = float(np.interp(z, za[order], xa[order, 0]))
        ub = float(np.interp(z, za[order], xb[order, 0]))
    pts = []
    for k, umax in ((upper, ua), (lower, ub)):
        z0, z1 = _z_range(surfaces[k])
        v = (z - z0) / (z1 - z0)
        u = np.linspace(0.0, umax, n)
        pts.append(eval_surface_points(surfaces[k], np.c_[u, np.full(n, v)])[:, :2])
    return np.vstack(pts)


def _z_range(s):
    z = s.control_points[..., 2]
    return float(z.min()), float(z.max())


def tube_roundness(surfaces, coupled, xi, stations=(0.5, 0.85, 1.5)):
    """Worst radial deviation from the best-fit circle, relative to the
    fitted radius, over cross-sections at the given heights."""
    worst = 0.0
    for z in stations:
        xy = tube_section(surfaces, coupled, xi, z)
        c, r = circle_fit(xy)
        worst = max(worst, float(np.abs(np.linalg.norm(xy - c, axis=1) - r).max() / r))
    return worst


BENCHMARKS = {
    "arch": lambda: (arch_surfaces(), arch_problem()),
    "tbeam": lambda: (tbeam_surfaces(), tbeam_problem()),
    "tube": lambda: (tube_surfaces(), tube_problem()),
}


def benchmark(name):
    """(surfaces, problem document) of a named benchmark."""
    return BENCHMARKS[name]()


def generate_benchmarks(out) -> dict:
    """Write ``<name>.geometry.json`` and ``<name>.problem.json`` for every
    benchmark; returns {name: (geometry path, problem path)}."""
    out = Path(out)
    paths = {}
    for name in BENCHMARKS:
        surfaces, problem = benchmark(name)
        g, p = out / f"{name}.geometry.json", out / f"{name}.problem.json"
        write_json(g, geometry_document(surfaces))
        write_json(p, problem)
        paths[name] = (g, p)
    return paths
