"""Command-line entry point: ``shellopt <subcommand> ...``.

Exit codes: 0 success, 2 nonconvergence, 3 input error, 4 gradient check
failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_NONCONVERGENCE = 2
EXIT_INPUT = 3
EXIT_GRADIENT = 4
# check-gradients fails above this; the per-variable verdicts in the report
# use the tighter benchmark tolerances
FAILURE_REL_ERROR = 1e-4


def _limit_threads(n):
    # must run before jax / BLAS are first imported
    if n is None:
        return
    n = str(max(1, int(n)))
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = n
    flags = os.environ.get("XLA_FLAGS", "")
    if "intra_op_parallelism_threads" not in flags:
        os.environ["XLA_FLAGS"] = (flags + f" --xla_cpu_multi_thread_eigen=false"
                                   f" intra_op_parallelism_threads={n}").strip()


def _parser():
    p = argparse.ArgumentParser(prog="shellopt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, docs=True):
        if docs:
            sp.add_argument("geometry", type=Path, help="geometry document (JSON)")
            sp.add_argument("problem", type=Path, help="problem document (JSON)")
        sp.add_argument("--out", "-o", type=Path, default=Path("out"), help="output directory")
        sp.add_argument("--threads", type=int, default=None, help="threads for assembly and linear algebra")
        sp.add_argument("--seed", type=int, default=0, help="seed for randomized steps")

    a = sub.add_parser("analyze", help="forward solve; writes VTK and a summary")
    common(a)
    a.add_argument("--tessellation", type=int, default=32, help="VTK samples per patch direction")

    g = sub.add_parser("check-gradients", help="adjoint totals against finite differences")
    common(g)
    g.add_argument("--step", type=float, default=1e-5, help="central-difference step as a fraction of the model diagonal")

    o = sub.add_parser("optimize", help="run the shape optimization")
    common(o)
    o.add_argument("--tol", type=float, default=None, help="optimizer tolerance")
    o.add_argument("--max-iter", type=int, default=None, help="optimizer iteration limit")
    o.add_argument("--tessellation", type=int, default=32, help="VTK samples per patch direction")
    o.add_argument("--optimizer-log-every", type=int, default=1, metavar="N",
                   help="print a progress line every N iterations")

    b = sub.add_parser("generate-benchmarks", help="write the benchmark geometry and problem documents")
    common(b, docs=False)
    return p


def _load(args):
    from .io import read_geometry, read_problem
    from .problems import build_setup

    for path in (args.geometry, args.problem):
        if not path.is_file():
            raise FileNotFoundError(f"{path}: no such file")
    surfaces, manual = read_geometry(args.geometry)
    problem = read_problem(args.problem, len(surfaces))
    return build_setup(surfaces, problem, manual or None)


def _write_summary(path, data):
    from .io import write_json
    write_json(path, data)


def cmd_analyze(args):
    import numpy as np

    from .io import write_vtk

    st = _load(args)
    d = st.graph.values["d"]
    P, U = write_vtk(st.model, d, args.out / "analysis.vtu", args.tessellation)
    summary = {
        "internal_energy": float(st.info["initial_energy"]),
        "max_displacement": float(np.linalg.norm(U, axis=1).max(initial=0.0)),
        "newton_residuals": [float(r) for r in next(c for c in st.graph.components if c.name == "disp").history],
    }
    _write_summary(args.out / "analysis.json", summary)
    print(f"internal energy {summary['internal_energy']:.10e}  max |u| {summary['max_displacement']:.10e}")
    return EXIT_OK


def cmd_check_gradients(args):
    from .problems import gradient_report

    st = _load(args)
    if not st.graph.design_vars:
        raise ValueError("the problem has no design variables (mode 'analysis')")
    t0 = time.perf_counter()
    rep = gradient_report(st.graph, step=args.step)
    rep["seconds"] = time.perf_counter() - t0
    _write_summary(args.out / "gradient_report.json", rep)
    for r in rep["variables"]:
        tag = "ok" if r["passed"] else "FAIL"
        print(f"{r['variable']:<16} n={r['size']:<4d} rel.err {r['rel_error']:.3e} (tol {r['tolerance']:.0e}) {tag}")
    print(f"worst relative error {rep['worst_rel_error']:.3e}")
    return EXIT_GRADIENT if rep["worst_rel_error"] > FAILURE_REL_ERROR else EXIT_OK


def cmd_optimize(args):
    from .io import write_geometry, write_iteration_log, write_vtk
    from .optimizer import sqp_solve
    from .problems import GraphProblem

    st = _load(args)
    if not st.graph.design_vars:
        raise ValueError("the problem has no design variables (mode 'analysis')")
    opts = st.problem.get("optimizer", {})
    tol = args.tol if args.tol is not None else opts.get("tol", 1e-6)
    max_iter = args.max_iter if args.max_iter is not None else opts.get("max_iter", 100)
    every = max(1, args.optimizer_log_every)
    write_vtk(st.model, st.graph.values["d"], args.out / "baseline.vtu", args.tessellation)

    gp = GraphProblem(st.graph)
    best = {"x": st.graph.get_design(), "f": None}

    def progress(rec):
        if rec.constraint_violation <= tol and (best["f"] is None or rec.objective <= best["f"]):
            best["f"] = rec.objective
            best["x"] = gp._x.copy()
        if rec.iteration % every == 0:
            print(f"iter {rec.iteration:4d}  f {rec.objective:.12e}  cv {rec.constraint_violation:.3e}  "
                  f"step {rec.step_norm:.3e}  kkt {rec.kkt_residual:.3e}", flush=True)

    try:
        res = sqp_solve(gp.opt_problem(tol, max_iter), callback=progress)
        status, history, x = res.status, res.history, res.x
    except Exception as exc:  # keep the best design found so far
        status, history, x = f"failed: {exc}", [], best["x"]
    if status != "converged" and best["f"] is not None:
        x = best["x"]
    write_iteration_log(history, args.out / "history.csv")
    gp._update(x)
    inters = None
    if st.coupled.nxi:
        st.coupled.update_intersections(st.graph.values["xi"])
    if st.model.intersections:
        inters = st.model.intersections
    write_geometry(args.out / "optimized.geometry.json", st.surfaces(), inters, status=status)
    write_vtk(st.model, st.graph.values["d"], args.out / "optimized.vtu", args.tessellation, st.surfaces())
    summary = {
        "status": status,
        "iterations": len(history) - 1 if history else 0,
        "objective": float(st.graph.values["objective"][0]),
        "initial_energy": float(st.info["initial_energy"]),
        "internal_energy": float(st.graph.values["int_energy"][0]),
        "design": {v: st.graph._producers()[v].values[v].tolist() for v in st.graph.design_vars},
    }
    _write_summary(args.out / "summary.json", summary)
    print(f"{status}: objective {summary['objective']:.12e} after {summary['iterations']} iterations")
    return EXIT_OK if status == "converged" else EXIT_NONCONVERGENCE


def cmd_generate(args):
    from .benchmarks import generate_benchmarks

    for name, (g, p) in generate_benchmarks(args.out).items():
        print(f"{name}: {g} {p}")
    return EXIT_OK


COMMANDS = {
    "analyze": cmd_analyze,
    "check-gradients": cmd_check_gradients,
    "optimize": cmd_optimize,
    "generate-benchmarks": cmd_generate,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    _limit_threads(args.threads)
    import numpy as np

    from .errors import DocumentError, NonConvergenceError, SetupError, ShellOptError

    np.random.seed(args.seed)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args)
    except (DocumentError, SetupError, FileNotFoundError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NonConvergenceError, ShellOptError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except json.JSONDecodeError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
