"""Geometry/problem documents, VTK export and iteration logs."""
from __future__ import annotations

import csv
import json
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .errors import DocumentError, ShellOptError
from .splines import KnotVector, NurbsSurface, eval_surface_points

SCHEMA_VERSION = 1


def load_schema(kind: str) -> dict:
    """The shipped JSON schema, ``kind`` is 'geometry' or 'problem'."""
    text = resources.files("shellopt").joinpath("schemas", f"{kind}.schema.json").read_text()
    return json.loads(text)


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else ""


def validate_document(doc, kind: str):
    """Check ``doc`` against the schema; errors carry a JSON pointer."""
    validator = jsonschema.Draft202012Validator(load_schema(kind))
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        ptr = _pointer(e.absolute_path)
        raise DocumentError(f"{kind} document invalid at '{ptr or '/'}': {e.message}", ptr)


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DocumentError(f"{path}: not valid JSON ({exc})", "") from exc


# --- geometry ------------------------------------------------------------------------


def surface_to_dict(s: NurbsSurface, name=None) -> dict:
    d = {
        "degrees": [int(s.knots_u.degree), int(s.knots_v.degree)],
        "knots_u": [float(k) for k in s.knots_u.knots],
        "knots_v": [float(k) for k in s.knots_v.knots],
        "control_points": s.flat_points().tolist(),
    }
    if name:
        d = {"name": name, **d}
    if s.is_rational:
        d["weights"] = s.weights.ravel().tolist()
    return d


def surface_from_dict(d: dict, pointer="") -> NurbsSurface:
    try:
        ku = KnotVector(d["degrees"][0], d["knots_u"])
    except ValueError as exc:
        raise DocumentError(f"{pointer}/knots_u: {exc}", f"{pointer}/knots_u") from exc
    try:
        kv = KnotVector(d["degrees"][1], d["knots_v"])
    except ValueError as exc:
        raise DocumentError(f"{pointer}/knots_v: {exc}", f"{pointer}/knots_v") from exc
    cp = np.asarray(d["control_points"], dtype=float)
    if cp.shape[0] != ku.n * kv.n:
        raise DocumentError(
            f"{pointer}/control_points: expected {ku.n * kv.n} points, got {cp.shape[0]}", f"{pointer}/control_points"
        )
    w = d.get("weights")
    if w is not None and len(w) != ku.n * kv.n:
        raise DocumentError(f"{pointer}/weights: expected {ku.n * kv.n} weights", f"{pointer}/weights")
    w = None if w is None else np.asarray(w, dtype=float).reshape(ku.n, kv.n)
    try:
        return NurbsSurface(ku, kv, cp.reshape(ku.n, kv.n, 3), w)
    except ValueError as exc:
        raise DocumentError(f"{pointer}: {exc}", pointer) from exc


def geometry_document(surfaces, intersections=None, names=None, status=None) -> dict:
    doc = {"version": SCHEMA_VERSION}
    if status is not None:
        doc["status"] = status
    doc |= {"patches": [surface_to_dict(s, names[i] if names else None) for i, s in enumerate(surfaces)]}
    if intersections:
        doc["intersections"] = [
            {"patches": [it.patch_a, it.patch_b], "xi_a": np.asarray(it.xi_a).tolist(), "xi_b": np.asarray(it.xi_b).tolist()}
            for it in intersections
        ]
    return doc


def parse_geometry(doc: dict):
    """(surfaces, manual) from a geometry document; ``manual`` maps patch
    pairs to user-supplied ``(xi_a, xi_b)`` polylines."""
    validate_document(doc, "geometry")
    surfaces = [surface_from_dict(p, f"/patches/{i}") for i, p in enumerate(doc["patches"])]
    manual = {}
    for j, it in enumerate(doc.get("intersections", [])):
        a, b = it["patches"]
        if a >= len(surfaces) or b >= len(surfaces) or a == b:
            raise DocumentError(f"/intersections/{j}/patches: invalid patch pair", f"/intersections/{j}/patches")
        xa, xb = np.asarray(it["xi_a"], dtype=float), np.asarray(it["xi_b"], dtype=float)
        if xa.shape != xb.shape:
            raise DocumentError(f"/intersections/{j}: xi_a and xi_b differ in length", f"/intersections/{j}")
        manual[(a, b)] = (xa, xb)
    return surfaces, manual


def read_geometry(path):
    return parse_geometry(_read_json(path))


def write_geometry(path, surfaces, intersections=None, names=None, status=None):
    write_json(path, geometry_document(surfaces, intersections, names, status))


def write_json(path, doc):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


# --- problem -------------------------------------------------------------------------


def parse_problem(doc: dict, npatches: int | None = None) -> dict:
    """Validate a problem document and check the cross references."""
    validate_document(doc, "problem")
    mode = doc.get("mode", "analysis")
    if mode in ("ffd", "combined") and not doc.get("ffd"):
        raise DocumentError(f"mode '{mode}' needs an 'ffd' section", "/ffd")
    if mode == "moving" and not doc.get("multilevel"):
        raise DocumentError("mode 'moving' needs a 'multilevel' section", "/multilevel")
    if npatches is not None:
        t = doc["thickness"]
        if isinstance(t, list) and len(t) != npatches:
            raise DocumentError(f"thickness lists {len(t)} values for {npatches} patches", "/thickness")
        refs = []
        for i, bc in enumerate(doc.get("boundary_conditions", [])):
            refs.append((bc["patch"], f"/boundary_conditions/{i}/patch"))
        for i, ld in enumerate(doc.get("loads", [])):
            refs += [(k, f"/loads/{i}/patches") for k in ld.get("patches", [])]
        for i, f in enumerate(doc.get("ffd", [])):
            refs += [(k, f"/ffd/{i}/patches") for k in f["patches"]]
        for i, m in enumerate(doc.get("multilevel", [])):
            refs.append((m["patch"], f"/multilevel/{i}/patch"))
        for i, c in enumerate(doc.get("constraints", [])):
            refs += [(k, f"/constraints/{i}/patches") for k in c.get("patches", [])]
        for k, ptr in refs:
            if k >= npatches:
                raise DocumentError(f"{ptr}: patch {k} does not exist ({npatches} patches)", ptr)
    return doc


def read_problem(path, npatches=None) -> dict:
    return parse_problem(_read_json(path), npatches)


# --- VTK -----------------------------------------------------------------------------


def tessellate(s: NurbsSurface, resolution=32):
    """Parameter grid (resolution x resolution points) and quad cells."""
    t = np.linspace(0.0, 1.0, resolution)
    U, V = np.meshgrid(t, t, indexing="ij")
    params = np.c_[U.ravel(), V.ravel()]
    i, j = np.meshgrid(np.arange(resolution - 1), np.arange(resolution - 1), indexing="ij")
    base = (i * resolution + j).ravel()
    cells = np.stack([base, base + resolution, base + resolution + 1, base + 1], axis=1)
    return params, cells


def write_vtk(model, d, path, resolution=32, surfaces=None):
    """VTK XML unstructured grid of the displaced patches (ASCII).

    Point data: ``displacement`` (3-vector) and ``disp_magnitude``.
    ``surfaces`` replaces the model's reference patches (e.g. an optimized
    design) while keeping its dof layout.
    """
    if resolution < 2:
        raise ValueError("tessellation resolution must be at least 2")
    d = np.zeros(model.ndof) if d is None else np.asarray(d, dtype=float)
    pts, disp, cells = [], [], []
    n0 = 0
    surfaces = surfaces or [p.surface for p in model.patches]
    for k, s in enumerate(surfaces):
        params, c = tessellate(s, resolution)
        X = eval_surface_points(s, params)
        dk = model.split(d)[k]
        # displacement control values interpolate with the same basis
        u = eval_surface_points(s.with_points(dk.reshape(-1, 3)), params) if np.any(dk) else np.zeros_like(X)
        pts.append(X + u)
        disp.append(u)
        cells.append(c + n0)
        n0 += len(X)
    P, U, C = np.vstack(pts), np.vstack(disp), np.vstack(cells)

    def arr(a):
        return "\n".join(" ".join(f"{v:.17g}" for v in row) for row in np.atleast_2d(a))

    lines = [
        '<?xml version="1.0"?>',
        '<VTKFile type="UnstructuredGrid" version="1.0" byte_order="LittleEndian">',
        "<UnstructuredGrid>",
        f'<Piece NumberOfPoints="{len(P)}" NumberOfCells="{len(C)}">',
        '<PointData Vectors="displacement" Scalars="disp_magnitude">',
        '<DataArray type="Float64" Name="displacement" NumberOfComponents="3" format="ascii">',
        arr(U),
        "</DataArray>",
        '<DataArray type="Float64" Name="disp_magnitude" format="ascii">',
        " ".join(f"{v:.17g}" for v in np.linalg.norm(U, axis=1)),
        "</DataArray>",
        "</PointData>",
        "<Points>",
        '<DataArray type="Float64" NumberOfComponents="3" format="ascii">',
        arr(P),
        "</DataArray>",
        "</Points>",
        "<Cells>",
        '<DataArray type="Int64" Name="connectivity" format="ascii">',
        " ".join(str(int(v)) for v in C.ravel()),
        "</DataArray>",
        '<DataArray type="Int64" Name="offsets" format="ascii">',
        " ".join(str(4 * (i + 1)) for i in range(len(C))),
        "</DataArray>",
        '<DataArray type="UInt8" Name="types" format="ascii">',
        " ".join(["9"] * len(C)),
        "</DataArray>",
        "</Cells>",
        "</Piece>",
        "</UnstructuredGrid>",
        "</VTKFile>",
    ]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise ShellOptError(f"cannot write {path}: {exc}") from exc
    return P, U


# --- iteration log -------------------------------------------------------------------

LOG_COLUMNS = ("iter", "objective", "constraint_violation", "step_norm", "kkt_residual")


def write_iteration_log(history, path):
    """CSV with one row per accepted iterate, 17 significant digits."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in history:
            w.writerow([r.iteration] + [f"{v:.17g}" for v in
                                        (r.objective, r.constraint_violation, r.step_norm, r.kkt_residual)])
