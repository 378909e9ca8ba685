"""Models, coupled systems and component graphs from problem documents."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .adjoint_graph import (
    ComponentGraph,
    CPFE2IGAComp,
    CPFFD2SurfComp,
    CPIGA2XiComp,
    DispComp,
    FFDDesignComp,
    FieldAssemblyComp,
    InputsComp,
    IntEnergyComp,
    KnotRefinementComp,
    LinearComp,
    OrderElevationComp,
    RegularizationComp,
    VolumeComp,
)
from .coupling import CoupledProblem
from .errors import SetupError
from .geometry import (
    FfdSpec,
    LeastSquaresFit,
    MultiPatchModel,
    build_extraction,
    build_ffd_matrix,
    embed_points,
    lagrange_nodes,
    make_ffd_block,
    padded_bounds,
    reduce_ffd_design,
)
from .intersections import compute_intersections
from .optimizer import OptProblem, check_gradients
from .shell import LoadCase, Material, ShellPatch
from .splines import KnotVector, elevate_operator_1d, refine_operator_1d


def _thickness(doc, k):
    t = doc["thickness"]
    return float(t[k] if isinstance(t, list) else t)


def build_model(surfaces, problem: dict, manual=None) -> MultiPatchModel:
    """Shell patches with material, loads and supports, plus the traced
    intersections."""
    mat = Material(problem["material"]["E"], problem["material"]["nu"])
    n = len(surfaces)
    loads = [[] for _ in range(n)]
    for ld in problem.get("loads", []):
        lc = LoadCase(ld["kind"], ld["magnitude"], tuple(ld.get("direction", (0.0, 0.0, -1.0))),
                      ld.get("follower", False))
        for k in ld.get("patches", range(n)):
            loads[k].append(lc)
    patches = [ShellPatch(s, _thickness(problem, k), mat, loads[k]) for k, s in enumerate(surfaces)]
    for bc in problem.get("boundary_conditions", []):
        patches[bc["patch"]].fix(bc["side"], bc.get("rows", 1), tuple(bc.get("components", (0, 1, 2))))
    its = compute_intersections(surfaces, problem.get("sampling_density", 64),
                                problem.get("mortar_resolution", 2), manual=manual)
    return MultiPatchModel(patches, its)


@dataclass
class Setup:
    """Model, coupled system and graph built for one problem."""

    model: MultiPatchModel
    coupled: CoupledProblem
    graph: ComponentGraph
    problem: dict
    info: dict = field(default_factory=dict)

    def surfaces(self, P=None):
        """Patches at control points ``P`` (default: the last graph run)."""
        P = self.graph.values["P"] if P is None else P
        return [s.with_points(Pk.reshape(-1, 3)) for s, Pk in zip(self.model.surfaces, self.model.split(P))]

    @property
    def optimized(self):
        return bool(self.graph.design_vars)


def _field_indices(model, patches, f):
    o = model.offsets
    return np.concatenate([o[k] + 3 * np.arange(model.patches[k].surface.ncp) + f for k in patches])


def _bound_vector(b, n, default):
    if b is None:
        return np.full(n, default)
    if isinstance(b, list):
        if len(b) != n:
            raise SetupError(f"bound list has {len(b)} entries for {n} design variables")
        return np.array([default if v is None else v for v in b], dtype=float)
    return np.full(n, float(b))


def _ffd_blocks(inputs, graph, model, P0, specs, pieces, bounds, ineqs, info):
    for b, spec in enumerate(specs):
        patches = list(spec["patches"])
        surfs = [model.patches[k].surface for k in patches]
        M = sp.block_diag([build_extraction(s, lagrange_nodes(s)[0]) for s in surfs]).tocsr()
        fit = LeastSquaresFit(M)
        PL0 = M @ np.vstack([model.split(P0)[k].reshape(-1, 3) for k in patches])
        box = padded_bounds(np.vstack([s.flat_points() for s in surfs]), spec["fields"], spec.get("pad", 0.2))
        block = make_ffd_block(spec["nel"], spec["degree"], box)
        A = build_ffd_matrix(block, embed_points(block, PL0, "Lagrange node"))
        pins = tuple((p["dir0"], tuple(p["sides0"]), p.get("dir1"), tuple(p.get("sides1", ())))
                     for p in spec.get("pins", []))
        fspec = FfdSpec(tuple(spec["fields"]), tuple(spec.get("align", ())), pins,
                        spec.get("regu", False), spec.get("regu_delta", 0.0), tuple(spec.get("rigid", ())))
        maps, G, g = reduce_ffd_design(block, fspec)
        info.setdefault("ffd", []).append({"block": block, "maps": maps, "patches": patches})
        col, gterms = 0, {}
        for fm in maps:
            f, x, nf = fm.field, f"ffd{b}_x{fm.field}", len(fm.x0)
            inputs.add_output(x, fm.x0)
            bounds[x] = (_bound_vector(spec.get("lower"), nf, -np.inf), _bound_vector(spec.get("upper"), nf, np.inf))
            graph.add(FFDDesignComp(f"ffd{b}_design{f}", x, f"ffd{b}_lattice{f}", fm))
            graph.add(CPFFD2SurfComp(f"ffd{b}_cpffd2surf{f}", f"ffd{b}_lattice{f}", f"ffd{b}_PL{f}", A))
            graph.add(CPFE2IGAComp(f"ffd{b}_cpfe2iga{f}", f"ffd{b}_PL{f}", f"ffd{b}_P{f}", fit))
            pieces[f"ffd{b}_P{f}"] = (_field_indices(model, patches, f), patches)
            gterms[x] = G[:, col:col + nf]
            col += nf
        if G.shape[0]:
            graph.add(LinearComp(f"ffd{b}_regu_comp", f"ffd{b}_regu", gterms, g))
            ineqs.append(f"ffd{b}_regu")


def align_matrix(shape, dirs):
    """0/1 matrix mapping shared values to a grid whose entries are equal
    along each listed direction."""
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    parent = np.arange(idx.size)

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    for d in dirs:
        for line in np.moveaxis(idx, d, -1).reshape(-1, shape[d]):
            for j in line[1:]:
                parent[find(j)] = find(line[0])
    roots = np.array([find(i) for i in range(idx.size)])
    col = {r: c for c, r in enumerate(np.unique(roots))}
    return sp.csr_matrix((np.ones(idx.size), (np.arange(idx.size), [col[r] for r in roots])),
                         shape=(idx.size, len(col)))


def _missing_knots(coarse: KnotVector, fine: KnotVector):
    out = []
    for u in fine.breaks[1:-1]:
        m = fine.multiplicity(u) - coarse.multiplicity(u)
        if m < 0:
            raise SetupError(f"design knot {u} has higher multiplicity than in the analysis knots")
        out += [u] * m
    for u in coarse.breaks[1:-1]:
        if fine.multiplicity(u) == 0:
            raise SetupError(f"design knot {u} is not an analysis knot")
    return np.array(out)


def _operator_1d(pd, knots, target: KnotVector):
    coarse = KnotVector(pd, knots)
    if pd > target.degree:
        raise SetupError("design degree exceeds the analysis degree")
    elev, Te = elevate_operator_1d(coarse, target.degree - pd)
    ins = _missing_knots(elev, target)
    Tr = refine_operator_1d(elev, ins)[1] if len(ins) else np.eye(elev.n)
    return coarse.n, Te, Tr


def _multilevel(inputs, graph, model, P0, specs, pieces, bounds, info):
    diam = model.diameter()
    for spec in specs:
        k = spec["patch"]
        s = model.patches[k].surface
        if s.is_rational:
            raise SetupError(f"multilevel design needs a polynomial patch (patch {k} is rational)")
        nfld = len(spec["fields"])
        aligns = spec.get("align", [[]] * nfld)
        lowers = spec.get("lower", [None] * nfld)
        uppers = spec.get("upper", [None] * nfld)
        for i, f in enumerate(spec["fields"]):
            (pu, pv), (ku, kv) = spec["degrees"][i], spec["knots"][i]
            nu, Teu, Tru = _operator_1d(pu, ku, s.knots_u)
            nv, Tev, Trv = _operator_1d(pv, kv, s.knots_v)
            T_oe = sp.kron(sp.csr_matrix(Teu), sp.csr_matrix(Tev)).tocsr()
            T_kr = sp.kron(sp.csr_matrix(Tru), sp.csr_matrix(Trv)).tocsr()
            Tal = align_matrix((nu, nv), aligns[i])
            full = (T_kr @ T_oe @ Tal).toarray()
            target = P0[_field_indices(model, [k], f)]
            x0 = np.linalg.lstsq(full, target, rcond=None)[0]
            err = np.max(np.abs(full @ x0 - target))
            if err > 1e-9 * diam:
                raise SetupError(f"field {f} of patch {k} is not in the design space (misfit {err:.3e})")
            x = f"ml{k}_x{f}"
            inputs.add_output(x, x0)
            bounds[x] = (_bound_vector(lowers[i], len(x0), -np.inf), _bound_vector(uppers[i], len(x0), np.inf))
            graph.add(LinearComp(f"ml{k}_align{f}", f"ml{k}_coarse{f}", {x: Tal}))
            graph.add(OrderElevationComp(f"ml{k}_elevate{f}", f"ml{k}_coarse{f}", f"ml{k}_elevated{f}", T_oe))
            graph.add(KnotRefinementComp(f"ml{k}_refine{f}", f"ml{k}_elevated{f}", f"ml{k}_P{f}", T_kr))
            pieces[f"ml{k}_P{f}"] = (_field_indices(model, [k], f), [k])
            info.setdefault("multilevel", []).append(
                {"patch": k, "field": f, "shape": (nu, nv), "align": Tal, "var": x})


def _regularization_lines(model, patches):
    """Index lines along each patch's u direction within a stacked field."""
    lines, o = [], 0
    for k in patches:
        nu, nv = model.patches[k].surface.shape
        grid = o + np.arange(nu * nv).reshape(nu, nv)
        lines += [grid[:, j] for j in range(nv)]
        o += nu * nv
    return lines


def build_setup(surfaces, problem: dict, manual=None, model=None) -> Setup:
    """Build the model, coupled system and component graph.

    Modes: ``analysis`` (no design variables), ``ffd`` (free-form
    deformation of fixed intersections), ``moving`` (multilevel design with
    moving intersections) and ``combined`` (FFD with moving intersections).
    The objective is the shell internal energy, divided by its initial value
    when ``objective.normalize`` is set (default), plus an optional
    second-difference regularization of one control-point field.
    """
    model = model or build_model(surfaces, problem, manual)
    mode = problem.get("mode", "analysis")
    moving = mode in ("moving", "combined")
    coupled = CoupledProblem(model, problem.get("penalty_coefficient", 1.0e3), moving=moving)
    P0 = model.flat_points()
    graph = ComponentGraph()
    inputs = graph.add(InputsComp("inputs"))
    pieces, bounds, ineqs, info = {}, {}, [], {}
    if mode in ("ffd", "combined"):
        _ffd_blocks(inputs, graph, model, P0, problem["ffd"], pieces, bounds, ineqs, info)
    elif mode == "moving":
        _multilevel(inputs, graph, model, P0, problem["multilevel"], pieces, bounds, info)
    else:
        inputs.add_output("P_ref", P0)
        pieces["P_ref"] = (np.arange(len(P0)), list(range(len(model.patches))))
    seen = np.concatenate([g for g, _ in pieces.values()])
    if len(np.unique(seen)) != len(seen):
        raise SetupError("a control-point coordinate is driven by more than one design block")
    graph.add(FieldAssemblyComp("assemble_P", "P", {v: g for v, (g, _) in pieces.items()}, P0))
    xi = None
    if coupled.nxi:
        graph.add(CPIGA2XiComp("cpiga2xi", coupled))
        xi = "xi"
    graph.add(DispComp("disp", coupled, xi=xi))
    graph.add(IntEnergyComp("int_energy", coupled))
    volumes = []
    for i, c in enumerate(problem.get("constraints", [])):
        graph.add(VolumeComp(f"volume_comp{i}", model, c.get("patches"), output=f"volume{i}"))
        volumes.append((f"volume{i}", c))
    graph.validate()
    base = graph.run()
    info["initial_energy"] = e0 = float(base["int_energy"][0])

    obj = problem.get("objective", {})
    scale = 1.0 / e0 if obj.get("normalize", True) and e0 > 0 else 1.0
    info["energy_scale"] = scale
    terms = {"int_energy": np.array([[scale]])}
    w = obj.get("regularization_weight", 0.0)
    if w > 0 and mode != "analysis":
        f = obj.get("regularization_field", 2)
        var = next((v for v in pieces if v.endswith(f"P{f}")), None)
        if var is None:
            raise SetupError(f"regularization field {f} is not a design field")
        gidx, patches = pieces[var]
        graph.add(RegularizationComp("regularization_comp", var, len(gidx), _regularization_lines(model, patches), w))
        terms["regularization"] = np.ones((1, 1))
    graph.add(LinearComp("objective_comp", "objective", terms))
    graph.set_objective("objective")
    for v, (lo, hi) in bounds.items():
        graph.add_design_var(v, lo, hi)
    for name in ineqs:
        graph.add_constraint(name, lower=0.0)
    for name, c in volumes:
        target = c.get("factor", 1.0) * float(base[name][0])
        info.setdefault("volume_targets", {})[name] = target
        if c.get("type", "eq") == "eq":
            graph.add_constraint(name, equals=target)
        else:
            graph.add_constraint(name, lower=target)
    graph.validate()
    graph.run()
    return Setup(model, coupled, graph, problem, info)


class GraphProblem:
    """Optimizer callbacks over a graph; one forward run per design point
    and one adjoint sweep for all functions."""

    def __init__(self, graph: ComponentGraph):
        self.graph = graph
        self._x = None
        self._totals = None
        self.evaluations = 0
        eq, ineq = [], []
        for name, c in graph.constraints.items():
            if c["equals"] is not None:
                eq.append((name, c["equals"], 1.0))
            else:
                if c["lower"] is not None:
                    ineq.append((name, c["lower"], 1.0))
                if c["upper"] is not None:
                    ineq.append((name, c["upper"], -1.0))
        self._eq, self._ineq = eq, ineq

    def _update(self, x):
        x = np.asarray(x, dtype=float)
        if self._x is None or not np.array_equal(x, self._x):
            self.graph.run(x)
            self._x = x.copy()
            self._totals = None
            self.evaluations += 1

    def _row(self, name):
        if self._totals is None:
            self._totals = self.graph.totals()
        return np.hstack([self._totals[(name, w)] for w in self.graph.design_vars])

    def fun(self, x):
        self._update(x)
        obj = self.graph.objective
        return float(self.graph.values[obj][0]), self._row(obj).ravel()

    def _stack(self, items, x):
        self._update(x)
        vals = [s * (self.graph.values[n] - np.asarray(ref)) for n, ref, s in items]
        jacs = [s * self._row(n) for n, _, s in items]
        return np.concatenate(vals), np.vstack(jacs)

    def eq(self, x):
        return self._stack(self._eq, x)

    def ineq(self, x):
        return self._stack(self._ineq, x)

    def opt_problem(self, tol=1e-6, max_iter=100) -> OptProblem:
        lo, hi = self.graph.bounds()
        return OptProblem(self.fun, self.graph.get_design(), lo, hi,
                          self.eq if self._eq else None, self.ineq if self._ineq else None, tol, max_iter)


GRADIENT_TOL = 1e-5
XI_PATHWAY_TOL = 1e-4


def _upstream(graph: ComponentGraph, output: str) -> set:
    """Variable names that ``output`` depends on."""
    prod = graph._producers()
    seen, stack = set(), [output]
    while stack:
        v = stack.pop()
        c = prod.get(v)
        if c is None:
            continue
        for w in c.inputs:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return seen


def gradient_report(graph: ComponentGraph, step=1e-5, order=4) -> dict:
    """Adjoint totals of the objective against central differences.

    The difference step is ``step`` times the bounding-box diagonal of the
    control points; the default fourth-order stencil keeps truncation error
    well below the tolerances on the benchmarks. Each entry's error is ``|g_i - g_fd,i| / |g_fd,i|``;
    entries with ``|g_i| <= 1e-8 ||g||`` are listed but not judged.
    Variables that reach the state through the moving intersection
    coordinates are held to the looser tolerance.
    """
    gp = GraphProblem(graph)
    x0 = graph.get_design()
    f0, g = gp.fun(x0)
    P = graph.values["P"].reshape(-1, 3)
    h = step * float(np.linalg.norm(P.max(axis=0) - P.min(axis=0)))
    entries = check_gradients(gp.fun, x0, step=h, grad=g, relative_step=False, order=order)
    fd = np.empty_like(g)
    for e in entries:
        fd[e.index] = e.fd
    gp._update(x0)
    judged = np.abs(g) > 1e-8 * np.linalg.norm(g)
    rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-300)
    via_xi = _upstream(graph, "xi") if "xi" in graph._producers() else set()
    out, o = [], 0
    for v, n in graph.design_sizes().items():
        sl = slice(o, o + n)
        err = float(rel[sl][judged[sl]].max(initial=0.0))
        tol = XI_PATHWAY_TOL if v in via_xi else GRADIENT_TOL
        out.append({"variable": v, "size": int(n), "rel_error": err, "tolerance": tol, "passed": err <= tol,
                    "xi_pathway": v in via_xi, "analytic": g[sl].tolist(), "fd": fd[sl].tolist(),
                    "judged": judged[sl].tolist()})
        o += n
    out.sort(key=lambda r: -r["rel_error"] / r["tolerance"])
    worst = max((r["rel_error"] for r in out), default=0.0)
    return {"objective": float(f0), "step": h, "order": order, "worst_rel_error": worst,
            "passed": all(r["passed"] for r in out), "variables": out}
