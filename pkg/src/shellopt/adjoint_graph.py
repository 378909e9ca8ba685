"""Component graph with forward evaluation and adjoint total derivatives.

Variables are named flat float vectors. Each variable is produced by exactly
one component; design variables are the outputs of an :class:`InputsComp`.
Explicit components map inputs to outputs and declare ``d out / d in``;
implicit components own an inner solver for ``R(x, y) = 0`` and declare
``dR/dx`` and the square ``dR/dy``.
"""
from __future__ import annotations

from collections import OrderedDict, defaultdict
from dataclasses import replace

import numpy as np
import scipy.sparse as sp

from .errors import ComponentError, FactorizationError, SetupError
from .solver import NewtonSettings, factorize, newton_solve


def _as_matrix(J, shape):
    if sp.issparse(J):
        J = J.tocsr()
    else:
        J = np.atleast_2d(np.asarray(J, dtype=float)).reshape(shape)
    if J.shape != shape:
        raise SetupError(f"partial has shape {J.shape}, expected {shape}")
    return J


class Component:
    """Base class. Subclasses fill ``inputs`` and ``outputs`` (name -> size)."""

    implicit = False

    def __init__(self, name):
        self.name = name
        self.inputs: dict = {}
        self.outputs: dict = {}

    def compute(self, inputs: dict) -> dict:
        """Explicit evaluation, or the inner solve for implicit components."""
        raise NotImplementedError

    def partials(self, inputs: dict, outputs: dict) -> dict:
        """``{(of, wrt): matrix}``; missing pairs are zero."""
        raise NotImplementedError

    def residual(self, inputs: dict, outputs: dict) -> dict:
        """Implicit residuals keyed by output name (diagnostics only)."""
        raise NotImplementedError


# --- generic explicit components -------------------------------------------------


class InputsComp(Component):
    """Holds design values; its outputs are the graph's design variables."""

    def __init__(self, name="inputs", **values):
        super().__init__(name)
        self.values = {}
        for k, v in values.items():
            self.add_output(k, v)

    def add_output(self, name, value):
        v = np.array(value, dtype=float).ravel()
        self.values[name] = v
        self.outputs[name] = len(v)

    def compute(self, inputs):
        return {k: v.copy() for k, v in self.values.items()}

    def partials(self, inputs, outputs):
        return {}


class LinearComp(Component):
    """``out = sum_k A_k @ in_k + offset``."""

    def __init__(self, name, output, terms: dict, offset=None):
        super().__init__(name)
        self.out = output
        self.terms = {k: (sp.csr_matrix(A) if sp.issparse(A) else np.atleast_2d(np.asarray(A, dtype=float)))
                      for k, A in terms.items()}
        m = {A.shape[0] for A in self.terms.values()}
        if len(m) != 1:
            raise SetupError(f"{name}: terms have different row counts")
        (m,) = m
        for k, A in self.terms.items():
            self.inputs[k] = A.shape[1]
        self.outputs[output] = m
        self.offset = np.zeros(m) if offset is None else np.asarray(offset, dtype=float).ravel()

    def compute(self, inputs):
        y = self.offset.copy()
        for k, A in self.terms.items():
            y = y + A @ inputs[k]
        return {self.out: y}

    def partials(self, inputs, outputs):
        return {(self.out, k): A for k, A in self.terms.items()}


class FFDDesignComp(LinearComp):
    """Reduced FFD design vector to full lattice field (align/pin elimination)."""

    def __init__(self, name, design, lattice, field_map):
        super().__init__(name, lattice, {design: field_map.T}, field_map.c)


class CPFFD2SurfComp(LinearComp):
    """Lattice field values to Lagrange nodal values of the embedded shells."""

    def __init__(self, name, lattice, nodes, A):
        super().__init__(name, nodes, {lattice: A})


class OrderElevationComp(LinearComp):
    """Coarse design control values to order-elevated control values."""

    def __init__(self, name, coarse, elevated, T):
        super().__init__(name, elevated, {coarse: T})


class KnotRefinementComp(LinearComp):
    """Order-elevated control values to analysis control values."""

    def __init__(self, name, elevated, refined, T):
        super().__init__(name, refined, {elevated: T})


class FieldAssemblyComp(LinearComp):
    """Scatter optimized field vectors into the global control-point vector;
    everything else keeps its reference value."""

    def __init__(self, name, output, pieces: dict, P0):
        """``pieces`` maps input name -> global indices it fills."""
        P0 = np.asarray(P0, dtype=float)
        n = len(P0)
        offset = P0.copy()
        terms = {}
        for k, gidx in pieces.items():
            gidx = np.asarray(gidx)
            terms[k] = sp.csr_matrix((np.ones(len(gidx)), (gidx, np.arange(len(gidx)))), shape=(n, len(gidx)))
            offset[gidx] = 0.0
        super().__init__(name, output, terms, offset)


class RegularizationComp(Component):
    """``weight * ||D x||^2`` with D the second differences of ``x`` along
    the given index lines."""

    def __init__(self, name, inp, size, lines, weight=0.0, output="regularization"):
        super().__init__(name)
        rows, cols, vals = [], [], []
        r = 0
        for line in lines:
            for j in range(1, len(line) - 1):
                rows += [r, r, r]
                cols += [line[j - 1], line[j], line[j + 1]]
                vals += [1.0, -2.0, 1.0]
                r += 1
        self.D = sp.csr_matrix((vals, (rows, cols)), shape=(r, size))
        self.weight = float(weight)
        self.inp, self.out = inp, output
        self.inputs[inp] = size
        self.outputs[output] = 1

    def compute(self, inputs):
        e = self.D @ inputs[self.inp]
        return {self.out: np.array([self.weight * (e @ e)])}

    def partials(self, inputs, outputs):
        g = 2 * self.weight * (self.D.T @ (self.D @ inputs[self.inp]))
        return {(self.out, self.inp): g[None, :]}


# --- geometry / analysis components ---------------------------------------------


class CPFE2IGAComp(Component):
    """Least-squares control points from Lagrange nodal values:
    ``M^T (M P - P_L) = 0``."""

    implicit = True

    def __init__(self, name, nodes, points, fit):
        super().__init__(name)
        self.fit = fit
        self.M = fit.M
        self.MtM = sp.csr_matrix(fit.MtM)
        self.nodes, self.points = nodes, points
        self.inputs[nodes] = self.M.shape[0]
        self.outputs[points] = self.M.shape[1]

    def compute(self, inputs):
        return {self.points: self.fit.solve(inputs[self.nodes])}

    def residual(self, inputs, outputs):
        r = self.M.T @ (self.M @ outputs[self.points] - inputs[self.nodes])
        return {self.points: r}

    def partials(self, inputs, outputs):
        return {(self.points, self.points): self.MtM, (self.points, self.nodes): -self.M.T.tocsr()}


class CPIGA2XiComp(Component):
    """Parametric coordinates of moving intersections from ``R_L(P, xi) = 0``."""

    implicit = True

    def __init__(self, name, problem, points="P", xi="xi"):
        super().__init__(name)
        self.problem = problem
        self.p_name, self.xi_name = points, xi
        self.inputs[points] = problem.nP
        self.outputs[xi] = problem.nxi
        self.guess = problem.initial_xi()

    def compute(self, inputs):
        xi = self.problem.solve_xi(inputs[self.p_name], self.guess)
        self.guess = xi.copy()
        return {self.xi_name: xi}

    def residual(self, inputs, outputs):
        return {self.xi_name: self.problem.xi_residual(inputs[self.p_name], outputs[self.xi_name])}

    def partials(self, inputs, outputs):
        JP, Jx = self.problem.xi_partials(inputs[self.p_name], outputs[self.xi_name])
        return {(self.xi_name, self.p_name): JP, (self.xi_name, self.xi_name): Jx}


class DispComp(Component):
    """Displacements of the coupled shell model from ``R(P, [xi,] d) = 0``.

    The Newton iteration is warm-started from the previous solution and
    polished past the nominal tolerance so that finite-difference checks see
    a fully converged state.
    """

    implicit = True

    def __init__(self, name, problem, points="P", disp="d", xi=None, settings=None):
        super().__init__(name)
        self.problem = problem
        self.p_name, self.d_name, self.xi_name = points, disp, xi
        self.inputs[points] = problem.nP
        if xi is not None:
            self.inputs[xi] = problem.nxi
        self.outputs[disp] = problem.ndof
        self.settings = settings or NewtonSettings(rtol=1e-10, atol=1e-300, max_iter=30, stol=1e-13)
        self.guess = np.zeros(problem.ndof)
        self.history = []
        self._cache = None

    def _xi(self, inputs):
        return inputs[self.xi_name] if self.xi_name else None

    def _assemble(self, inputs, d):
        key = (inputs[self.p_name].tobytes(), None if self.xi_name is None else self._xi(inputs).tobytes(),
               d.tobytes())
        if self._cache is None or self._cache[0] != key:
            self._cache = (key, self.problem.assemble(inputs[self.p_name], d, self._xi(inputs)))
        return self._cache[1]

    def compute(self, inputs):
        def assemble(d):
            R, K, _, _ = self._assemble(inputs, d)
            return R, K

        # tolerances are relative to the load scale ||R(P, 0)||, not to the
        # warm-started initial residual
        scale = np.linalg.norm(self.problem.residual(inputs[self.p_name], np.zeros(self.problem.ndof),
                                                     self._xi(inputs)))
        s = self.settings
        settings = replace(s, atol=max(s.atol, s.rtol * scale))
        res = newton_solve(assemble, self.guess, settings,
                           residual=lambda d: self.problem.residual(inputs[self.p_name], d, self._xi(inputs)))
        d, hist = res.d, list(res.history)
        # polish: extra full steps while they still reduce the residual
        for _ in range(3):
            R, K = assemble(d)
            trial = d + factorize(K).solve(-R)
            rn = np.linalg.norm(self.problem.residual(inputs[self.p_name], trial, self._xi(inputs)))
            if not rn < 0.5 * hist[-1]:
                break
            d = trial
            hist.append(rn)
        self.history = hist
        self.guess = d.copy()
        return {self.d_name: d}

    def residual(self, inputs, outputs):
        return {self.d_name: self.problem.residual(inputs[self.p_name], outputs[self.d_name], self._xi(inputs))}

    def partials(self, inputs, outputs):
        _, K, G, Gx = self._assemble(inputs, outputs[self.d_name])
        J = {(self.d_name, self.d_name): K, (self.d_name, self.p_name): G}
        if self.xi_name:
            J[(self.d_name, self.xi_name)] = Gx
        return J


class IntEnergyComp(Component):
    """Total shell internal energy (without the penalty energy)."""

    def __init__(self, name, problem, points="P", disp="d", output="int_energy"):
        super().__init__(name)
        self.problem = problem
        self.p_name, self.d_name, self.out = points, disp, output
        self.inputs[points] = problem.nP
        self.inputs[disp] = problem.ndof
        self.outputs[output] = 1

    def compute(self, inputs):
        return {self.out: np.array([self.problem.internal_energy(inputs[self.p_name], inputs[self.d_name])])}

    def partials(self, inputs, outputs):
        gP, gd = self.problem.internal_energy_grads(inputs[self.p_name], inputs[self.d_name])
        return {(self.out, self.p_name): gP[None, :], (self.out, self.d_name): gd[None, :]}


class VolumeComp(Component):
    """Shell material volume ``sum_k t_k * area_k`` over selected patches."""

    def __init__(self, name, model, patches=None, points="P", output="volume"):
        super().__init__(name)
        from .shell import kernel_for

        self.model = model
        self.sel = list(range(len(model.patches))) if patches is None else list(patches)
        self.kernels = {k: kernel_for(model.patches[k]) for k in self.sel}
        self.p_name, self.out = points, output
        self.inputs[points] = model.ndof
        self.outputs[output] = 1

    def _parts(self, P):
        o = self.model.offsets
        for k in self.sel:
            yield k, o[k], o[k + 1], P[o[k]:o[k + 1]]

    def compute(self, inputs):
        v = sum(self.model.patches[k].thickness * self.kernels[k].area(Pk)
                for k, _, _, Pk in self._parts(inputs[self.p_name]))
        return {self.out: np.array([v])}

    def partials(self, inputs, outputs):
        g = np.zeros(self.model.ndof)
        for k, a, b, Pk in self._parts(inputs[self.p_name]):
            g[a:b] = self.model.patches[k].thickness * self.kernels[k].area_grad(Pk)
        return {(self.out, self.p_name): g[None, :]}


# --- graph -----------------------------------------------------------------------


class ComponentGraph:
    """Acyclic graph of components connected by variable name."""

    state_cache = 8

    def __init__(self):
        self.components: list = []
        self.design_vars: dict = {}
        self.objective = None
        self.constraints: dict = {}
        self.values: dict = {}
        self._partials: dict = {}
        self._order = None
        self._inputs_cache: dict = {}
        self._last_key: dict = {}

    # -- construction
    def add(self, comp: Component):
        if any(c.name == comp.name for c in self.components):
            raise SetupError(f"duplicate component name '{comp.name}'")
        self.components.append(comp)
        self._order = None
        return comp

    def add_design_var(self, name, lower=-np.inf, upper=np.inf):
        self.design_vars[name] = (lower, upper)

    def set_objective(self, name):
        self.objective = name

    def add_constraint(self, name, equals=None, lower=None, upper=None):
        """Constraint on a graph variable: ``equals`` or ``lower``/``upper``."""
        if equals is None and lower is None and upper is None:
            raise SetupError(f"constraint '{name}' has no bound")
        self.constraints[name] = {"equals": equals, "lower": lower, "upper": upper}

    def _producers(self):
        prod = {}
        for c in self.components:
            for v in c.outputs:
                if v in prod:
                    raise SetupError(f"variable '{v}' produced by both '{prod[v].name}' and '{c.name}'")
                prod[v] = c
        return prod

    def validate(self):
        prod = self._producers()
        for c in self.components:
            for v, n in c.inputs.items():
                if v not in prod:
                    raise SetupError(f"input '{v}' of '{c.name}' is not connected")
                if prod[v].outputs[v] != n:
                    raise SetupError(
                        f"size mismatch for '{v}': '{prod[v].name}' gives {prod[v].outputs[v]}, "
                        f"'{c.name}' expects {n}"
                    )
        for v in list(self.design_vars) + [self.objective] + list(self.constraints):
            if v is not None and v not in prod:
                raise SetupError(f"variable '{v}' is not produced by any component")
        for v in self.design_vars:
            if not isinstance(prod[v], InputsComp):
                raise SetupError(f"design variable '{v}' must come from an inputs component")
        # topological order (Kahn)
        deps = {c.name: {prod[v].name for v in c.inputs} for c in self.components}
        by_name = {c.name: c for c in self.components}
        order, ready = [], [c.name for c in self.components if not deps[c.name]]
        remaining = {k: set(v) for k, v in deps.items()}
        while ready:
            n = ready.pop(0)
            order.append(by_name[n])
            for m, dd in remaining.items():
                if n in dd:
                    dd.discard(n)
                    if not dd and m not in [o.name for o in order] and m not in ready:
                        ready.append(m)
        if len(order) != len(self.components):
            raise SetupError("component graph has a cycle")
        self._order = order
        self._prod = prod
        return order

    @property
    def order(self):
        return self._order or self.validate()

    @property
    def inputs_comp(self) -> InputsComp:
        return self._producers()[next(iter(self.design_vars))]

    def design_sizes(self):
        ic = self._producers()
        return {v: ic[v].outputs[v] for v in self.design_vars}

    # -- design vector helpers
    def get_design(self):
        prod = self._producers()
        return np.concatenate([prod[v].values[v] for v in self.design_vars])

    def set_design(self, x):
        prod = self._producers()
        x = np.asarray(x, dtype=float)
        o = 0
        for v in self.design_vars:
            n = prod[v].outputs[v]
            prod[v].values[v] = x[o:o + n].copy()
            o += n

    def bounds(self):
        lo, hi = [], []
        for v, n in self.design_sizes().items():
            l, u = self.design_vars[v]
            lo.append(np.broadcast_to(np.asarray(l, dtype=float), (n,)))
            hi.append(np.broadcast_to(np.asarray(u, dtype=float), (n,)))
        return np.concatenate(lo), np.concatenate(hi)

    # -- evaluation
    def run(self, x=None) -> dict:
        """Forward evaluation in topological order. Components whose inputs
        are bit-identical to the previous run (or, for implicit components,
        to one of the last few runs) are not re-evaluated."""
        if x is not None:
            self.set_design(x)
        vals = {}
        for c in self.order:
            ins = {v: vals[v] for v in c.inputs}
            key = tuple(ins[v].tobytes() for v in c.inputs)
            cache = self._inputs_cache.setdefault(c.name, OrderedDict())
            if key in cache and not isinstance(c, InputsComp):
                out = cache[key]
                cache.move_to_end(key)
            else:
                try:
                    out = c.compute(ins)
                except ComponentError:
                    raise
                except Exception as exc:
                    raise ComponentError(c.name, exc) from exc
                out = {k: np.asarray(v, dtype=float).ravel() for k, v in out.items()}
                cache[key] = out
                # implicit solves are warm-started, so remembering a few
                # recent states keeps revisited designs bit-identical
                while len(cache) > (self.state_cache if c.implicit else 1):
                    cache.popitem(last=False)
            if self._last_key.get(c.name) != key:
                self._partials.pop(c.name, None)
                self._last_key[c.name] = key
            vals.update(out)
        self.values = vals
        return vals

    def _component_partials(self, c):
        hit = self._partials.get(c.name)
        if hit is not None:
            return hit
        ins = {v: self.values[v] for v in c.inputs}
        outs = {v: self.values[v] for v in c.outputs}
        try:
            raw = c.partials(ins, outs)
        except Exception as exc:
            raise ComponentError(c.name, exc) from exc
        sizes = dict(c.inputs)
        sizes.update(c.outputs)
        J = {(o, w): _as_matrix(M, (c.outputs[o], sizes[w])) for (o, w), M in raw.items()}
        self._partials[c.name] = J
        return J

    def _solve_implicit(self, c, J, rhs, trans):
        (y,) = c.outputs
        A = J[(y, y)]
        try:
            if sp.issparse(A):
                f = factorize(A)
                return f.solve(rhs, trans=trans)
            A = A.T if trans else A
            return np.linalg.solve(A, rhs)
        except (FactorizationError, np.linalg.LinAlgError) as exc:
            raise ComponentError(c.name, exc) from exc

    def totals(self, of=None, wrt=None, mode="adjoint") -> dict:
        """Total derivatives ``{(of, wrt): dense (size_of, size_wrt)}``.

        Adjoint mode seeds every requested output and sweeps backwards with
        transpose solves; direct mode pushes design perturbations forward.
        """
        if not self.values:
            self.run()
        of = [self.objective] + list(self.constraints) if of is None else list(of)
        wrt = list(self.design_vars) if wrt is None else list(wrt)
        for c in self.components:
            if c.implicit and len(c.outputs) != 1:
                raise SetupError(f"implicit component '{c.name}' must have one output")
        if mode == "adjoint":
            return self._adjoint(of, wrt)
        if mode == "direct":
            return self._direct(of, wrt)
        raise ValueError("mode must be 'adjoint' or 'direct'")

    def _adjoint(self, of, wrt):
        sizes = {v: len(self.values[v]) for v in self.values}
        nseed = sum(sizes[v] for v in of)
        bar = defaultdict(lambda: None)
        o = 0
        for v in of:
            seed = np.zeros((sizes[v], nseed))
            seed[:, o:o + sizes[v]] = np.eye(sizes[v])
            bar[v] = seed if bar[v] is None else bar[v] + seed
            o += sizes[v]

        def add(v, contrib):
            bar[v] = contrib if bar[v] is None else bar[v] + contrib

        for c in reversed(self.order):
            ybars = {y: bar[y] for y in c.outputs if bar[y] is not None}
            if not ybars:
                continue
            J = self._component_partials(c)
            if c.implicit:
                (y,) = c.outputs
                psi = self._solve_implicit(c, J, ybars[y], trans=True)
                psi = np.asarray(psi).reshape(sizes[y], nseed)
                for (r, w), M in J.items():
                    if w != y:
                        add(w, -np.asarray(M.T @ psi))
            else:
                for (r, w), M in J.items():
                    if r in ybars:
                        add(w, np.asarray(M.T @ ybars[r]))
        out = {}
        for w in wrt:
            B = bar[w] if bar[w] is not None else np.zeros((sizes[w], nseed))
            o = 0
            for v in of:
                out[(v, w)] = B[:, o:o + sizes[v]].T.copy()
                o += sizes[v]
        return out

    def _direct(self, of, wrt):
        sizes = {v: len(self.values[v]) for v in self.values}
        nd = sum(sizes[w] for w in wrt)
        dot = {}
        o = 0
        for w in wrt:
            seed = np.zeros((sizes[w], nd))
            seed[:, o:o + sizes[w]] = np.eye(sizes[w])
            dot[w] = seed
            o += sizes[w]
        for c in self.order:
            if isinstance(c, InputsComp):
                continue
            J = self._component_partials(c)
            if c.implicit:
                (y,) = c.outputs
                rhs = np.zeros((sizes[y], nd))
                for (r, w), M in J.items():
                    if w != y and w in dot:
                        rhs -= np.asarray(M @ dot[w])
                dot[y] = np.asarray(self._solve_implicit(c, J, rhs, trans=False)).reshape(sizes[y], nd)
            else:
                for y in c.outputs:
                    acc = np.zeros((sizes[y], nd))
                    for (r, w), M in J.items():
                        if r == y and w in dot:
                            acc += np.asarray(M @ dot[w])
                    dot[y] = acc
        out = {}
        for v in of:
            D = dot.get(v, np.zeros((sizes[v], nd)))
            o = 0
            for w in wrt:
                out[(v, w)] = D[:, o:o + sizes[w]].copy()
                o += sizes[w]
        return out

    # -- flattened views for the optimizer
    def objective_and_gradient(self, x):
        self.run(x)
        T = self.totals(of=[self.objective])
        g = np.concatenate([T[(self.objective, w)].ravel() for w in self.design_vars])
        return float(self.values[self.objective][0]), g

    def gradient(self, of=None):
        of = self.objective if of is None else of
        T = self.totals(of=[of])
        return np.hstack([T[(of, w)] for w in self.design_vars])


def forward_eval(graph: ComponentGraph, design=None) -> dict:
    return graph.run(design)


def adjoint_total_derivatives(graph: ComponentGraph, outputs=None, wrt=None) -> dict:
    return graph.totals(of=outputs, wrt=wrt, mode="adjoint")
