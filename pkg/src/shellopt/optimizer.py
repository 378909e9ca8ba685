"""Sequential quadratic programming with a damped BFGS Hessian.

The QP subproblem is solved by the dual active-set method of Goldfarb and
Idnani (strictly convex QPs), with bounds entering as ordinary inequality
rows. Steps are globalized with an l1 merit function and backtracking.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import NonConvergenceError, QPInfeasibleError


# --- QP ------------------------------------------------------------------------


@dataclass
class QPResult:
    x: np.ndarray
    multipliers: np.ndarray
    active: list
    iterations: int


def solve_qp(G, a, C=None, b=None, meq=0, max_iter=None, tol=1e-12) -> QPResult:
    """Minimize ``0.5 x^T G x + a^T x`` subject to ``C[:, i]^T x >= b[i]``,
    the first ``meq`` columns being equalities. G must be positive definite.

    Dense implementation of the Goldfarb-Idnani dual method. Raises
    :class:`QPInfeasibleError` when the constraints are inconsistent.
    """
    G = np.asarray(G, dtype=float)
    a = np.asarray(a, dtype=float)
    n = len(a)
    C = np.zeros((n, 0)) if C is None else np.asarray(C, dtype=float).reshape(n, -1)
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float).ravel()
    m = C.shape[1]
    try:
        cho = sla.cho_factor(G)
    except np.linalg.LinAlgError as exc:
        raise ValueError("QP Hessian is not positive definite") from exc
    Ginv = sla.cho_solve(cho, np.eye(n))
    x = -Ginv @ a
    active: list = []
    u = np.zeros(0)
    max_iter = max_iter or 10 * (m + n) + 50
    cnorm = np.maximum(np.linalg.norm(C, axis=0), 1e-300)

    def proj(nplus):
        """Step direction z in primal space and r in the active duals."""
        if not active:
            return Ginv @ nplus, np.zeros(0)
        N = C[:, active] * sign[active]
        GN = Ginv @ N
        S = N.T @ GN
        Nstar = np.linalg.solve(S, GN.T)
        r = Nstar @ nplus
        z = Ginv @ nplus - GN @ r
        return z, r

    sign = np.ones(m)
    it = 0
    while True:
        it += 1
        if it > max_iter:
            raise NonConvergenceError("QP active-set iteration limit reached")
        s = (C.T @ x - b) if m else np.zeros(0)
        # pick next constraint: pending equalities first, then most violated
        p = None
        for i in range(meq):
            if i not in active:
                p = i
                break
        if p is None:
            cand = [(s[i] / cnorm[i], i) for i in range(meq, m) if i not in active and s[i] < -tol * max(1.0, abs(b[i]))]
            if not cand:
                return QPResult(x, _full_multipliers(m, active, u, sign), list(active), it)
            p = min(cand)[1]
        if p < meq:
            sign[p] = -1.0 if s[p] > 0 else 1.0
        nplus = C[:, p] * sign[p]
        sp_ = s[p] * sign[p]
        uplus = np.r_[u, 0.0]
        while True:
            z, r = proj(nplus)
            # partial (dual) step limit
            t1, l = np.inf, None
            for j, idx in enumerate(active):
                if idx >= meq and r[j] > 1e-14:
                    tj = uplus[j] / r[j]
                    if tj < t1:
                        t1, l = tj, j
            zn = z @ nplus
            t2 = -sp_ / zn if abs(zn) > 1e-14 * max(1.0, np.linalg.norm(nplus) ** 2 * np.abs(Ginv).max()) else np.inf
            t = min(t1, t2)
            if not np.isfinite(t):
                raise QPInfeasibleError(f"QP constraints are inconsistent (constraint {p})")
            if not np.isfinite(t2):
                # dual step only
                uplus = uplus + t * np.r_[-r, 1.0]
                del active[l]
                uplus = np.delete(uplus, l)
                continue
            x = x + t * z
            uplus = uplus + t * np.r_[-r, 1.0]
            sp_ = sp_ + t * zn
            if t == t2:
                active.append(p)
                u = uplus
                break
            del active[l]
            uplus = np.delete(uplus, l)


def _full_multipliers(m, active, u, sign):
    lam = np.zeros(m)
    for j, idx in enumerate(active):
        lam[idx] = u[j] * sign[idx]
    return lam


# --- SQP -----------------------------------------------------------------------


@dataclass
class OptProblem:
    """``min f(x)`` s.t. ``c_eq(x) = 0``, ``c_in(x) >= 0``, ``lower <= x <= upper``.

    ``fun(x)`` returns ``(f, grad)``; ``eq(x)`` / ``ineq(x)`` return
    ``(values, jacobian)`` or are None.
    """

    fun: callable
    x0: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    eq: callable = None
    ineq: callable = None
    tol: float = 1e-6
    max_iter: int = 100

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).ravel()
        n = len(self.x0)
        self.lower = np.full(n, -np.inf) if self.lower is None else np.broadcast_to(
            np.asarray(self.lower, dtype=float), (n,)).copy()
        self.upper = np.full(n, np.inf) if self.upper is None else np.broadcast_to(
            np.asarray(self.upper, dtype=float), (n,)).copy()
        if np.any(self.x0 < self.lower - 1e-12) or np.any(self.x0 > self.upper + 1e-12):
            raise ValueError("initial point violates the bounds")
        if not (self.tol > 0 and self.max_iter >= 0):
            raise ValueError("tolerance must be positive")


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    constraint_violation: float
    step_norm: float
    kkt_residual: float


@dataclass
class OptResult:
    x: np.ndarray
    fun: float
    history: list = field(default_factory=list)
    status: str = "converged"
    iterations: int = 0
    multipliers: dict = field(default_factory=dict)

    @property
    def converged(self):
        return self.status == "converged"


def _constraints(problem, x):
    n = len(x)
    ce, Ae = np.zeros(0), np.zeros((0, n))
    ci, Ai = np.zeros(0), np.zeros((0, n))
    if problem.eq is not None:
        v, J = problem.eq(x)
        ce, Ae = np.atleast_1d(np.asarray(v, dtype=float)), np.atleast_2d(np.asarray(J, dtype=float)).reshape(-1, n)
    if problem.ineq is not None:
        v, J = problem.ineq(x)
        ci, Ai = np.atleast_1d(np.asarray(v, dtype=float)), np.atleast_2d(np.asarray(J, dtype=float)).reshape(-1, n)
    return ce, Ae, ci, Ai


def _violation(ce, ci):
    return float(np.sum(np.abs(ce)) + np.sum(np.maximum(0.0, -ci)))


def _evaluate(problem, x):
    f, g = problem.fun(x)
    f = float(f)
    g = np.asarray(g, dtype=float).ravel()
    ce, Ae, ci, Ai = _constraints(problem, x)
    vals = np.r_[f, g, ce, ci, Ae.ravel(), Ai.ravel()]
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError(f"non-finite objective/constraint at x = {x.tolist()}")
    return f, g, ce, Ae, ci, Ai


def _bound_rows(x, lower, upper):
    n = len(x)
    rows, rhs = [], []
    for i in range(n):
        if np.isfinite(lower[i]):
            e = np.zeros(n)
            e[i] = 1.0
            rows.append(e)
            rhs.append(lower[i] - x[i])
        if np.isfinite(upper[i]):
            e = np.zeros(n)
            e[i] = -1.0
            rows.append(e)
            rhs.append(x[i] - upper[i])
    if not rows:
        return np.zeros((0, n)), np.zeros(0)
    return np.array(rows), np.array(rhs)


def _is_pd(B):
    try:
        np.linalg.cholesky(B)
        return True
    except np.linalg.LinAlgError:
        return False


def _qp_step(B, g, ce, Ae, ci, Ai, Ab, bb):
    """Solve the SQP subproblem; returns (p, lambda_eq, lambda_in, lambda_bounds)."""
    C = np.vstack([Ae, Ai, Ab]).T
    b = np.r_[-ce, -ci, bb]
    res = solve_qp(B, g, C, b, meq=len(ce))
    lam = res.multipliers
    ne, ni = len(ce), len(ci)
    return res.x, lam[:ne], lam[ne:ne + ni], lam[ne + ni:]


def _elastic_step(B, g, ce, Ae, ci, Ai, Ab, bb, rho):
    """Feasibility-restoring QP with nonnegative elastic slacks."""
    n = len(g)
    ne, ni = len(ce), len(ci)
    ns = ne + ni
    eps = 1e-8 * max(1.0, np.abs(B).max())
    H = sla.block_diag(B, eps * np.eye(ns))
    q = np.r_[g, rho * np.ones(ns)]
    I = np.eye(ns)
    Z = np.zeros
    rows = [
        np.hstack([Ae, I[:ne]]),        # Ae p + ce + v >= 0
        np.hstack([-Ae, I[:ne]]),       # -(Ae p + ce) + v >= 0
        np.hstack([Ai, I[ne:]]),        # Ai p + ci + v >= 0
        np.hstack([Ab, Z((len(bb), ns))]),
        np.hstack([Z((ns, n)), I]),     # v >= 0
    ]
    rhs = np.r_[-ce, ce, -ci, bb, np.zeros(ns)]
    res = solve_qp(H, q, np.vstack(rows).T, rhs, meq=0)
    return res.x[:n]


def sqp_solve(problem: OptProblem, callback=None) -> OptResult:
    """SLSQP-style sequential quadratic programming.

    Termination: constraint violation <= tol and either the KKT residual is
    <= tol, the step is <= tol (relative to max(1, |x|)), or the objective
    change of an accepted step, or the predicted merit decrease of a step
    the line search cannot realize, is <= tol (relative to max(1, |f|)).
    ``callback(record)`` is called once per accepted iterate.
    """
    x = problem.x0.copy()
    n = len(x)
    tol = problem.tol
    f, g, ce, Ae, ci, Ai = _evaluate(problem, x)
    B = np.eye(n)
    mu = 0.0
    history = []
    lam_e, lam_i = np.zeros(len(ce)), np.zeros(len(ci))
    restorations = 0

    def kkt(g, Ae, Ai, lam_e, lam_i, lam_b, Ab):
        r = g - Ae.T @ lam_e - Ai.T @ lam_i - Ab.T @ lam_b
        return float(np.max(np.abs(r))) if n else 0.0

    def record(k, step):
        rec = IterationRecord(k, f, _violation(ce, ci), step, kkt_res)
        history.append(rec)
        if callback is not None:
            callback(rec)

    kkt_res = np.inf
    status = "iteration limit"
    for k in range(problem.max_iter + 1):
        Ab, bb = _bound_rows(x, problem.lower, problem.upper)
        if not _is_pd(B):
            # roundoff in long runs can break the damped update; restart it
            B = np.eye(n) * max(np.trace(B) / n, 1e-12) if np.all(np.isfinite(B)) else np.eye(n)
            if not _is_pd(B):
                B = np.eye(n)
        try:
            p, lam_e, lam_i, lam_b = _qp_step(B, g, ce, Ae, ci, Ai, Ab, bb)
        except (QPInfeasibleError, NonConvergenceError):
            restorations += 1
            if restorations > 5:
                raise QPInfeasibleError("linearized constraints stay inconsistent after restoration")
            p = _elastic_step(B, g, ce, Ae, ci, Ai, Ab, bb, rho=max(mu, 1.0) * 10)
            lam_e, lam_i, lam_b = np.zeros(len(ce)), np.zeros(len(ci)), np.zeros(len(bb))
        kkt_res = kkt(g, Ae, Ai, lam_e, lam_i, lam_b, Ab)
        viol = _violation(ce, ci)
        if k == 0:
            record(0, 0.0)
        if viol <= tol and (kkt_res <= tol or np.linalg.norm(p) <= tol * max(1.0, np.linalg.norm(x))):
            status = "converged"
            break
        if k == problem.max_iter:
            break
        # merit parameter
        lam_max = max([np.abs(lam_e).max(initial=0.0), np.abs(lam_i).max(initial=0.0)])
        mu = max(1.5 * lam_max, 0.5 * (mu + 1.5 * lam_max), 1e-12)

        def merit(fv, cev, civ):
            return fv + mu * _violation(cev, civ)

        phi0 = merit(f, ce, ci)
        dphi = g @ p - mu * viol
        alpha = 1.0
        accepted = False
        for _ in range(30):
            xt = np.clip(x + alpha * p, problem.lower, problem.upper)
            try:
                ft, gt, cet, Aet, cit, Ait = _evaluate(problem, xt)
            except Exception:
                alpha *= 0.5
                continue
            if merit(ft, cet, cit) <= phi0 + 1e-4 * alpha * min(dphi, 0.0) + 1e-15 * abs(phi0):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # a predicted gain below the tolerance is lost in function noise
            feasible = viol <= tol
            status = "converged" if feasible and abs(dphi) <= tol * max(1.0, abs(f)) else "line search failed"
            break
        # one quadratic-interpolation refinement of the step length; exact on
        # quadratics, which keeps the BFGS directions conjugate there
        phit = merit(ft, cet, cit)
        curv = (phit - phi0 - alpha * dphi) / alpha**2
        if curv > 0 and dphi < 0:
            a2 = min(-dphi / (2 * curv), 10 * alpha)
            if abs(a2 - alpha) > 1e-3 * alpha:
                xr = np.clip(x + a2 * p, problem.lower, problem.upper)
                try:
                    trial = _evaluate(problem, xr)
                    if merit(trial[0], trial[2], trial[4]) < phit:
                        xt, (ft, gt, cet, Aet, cit, Ait) = xr, trial
                except Exception:
                    pass
        s = xt - x
        # damped BFGS on the Lagrangian gradient
        gl_old = g - Ae.T @ lam_e - Ai.T @ lam_i
        gl_new = gt - Aet.T @ lam_e - Ait.T @ lam_i
        y = gl_new - gl_old
        Bs = B @ s
        sBs = s @ Bs
        sy = s @ y
        if sBs > 0:
            if sy < 0.2 * sBs:
                theta = 0.8 * sBs / (sBs - sy)
                y = theta * y + (1 - theta) * Bs
                sy = s @ y
            B = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy
            B = 0.5 * (B + B.T)
        df = abs(ft - f)
        x, f, g, ce, Ae, ci, Ai = xt, ft, gt, cet, Aet, cit, Ait
        record(k + 1, float(np.linalg.norm(s)))
        if _violation(ce, ci) <= tol and df <= tol * max(1.0, abs(f)):
            # confirm with the KKT residual of a fresh subproblem at the next pass
            Ab, bb = _bound_rows(x, problem.lower, problem.upper)
            try:
                p2, le, li, lb = _qp_step(B, g, ce, Ae, ci, Ai, Ab, bb)
                kkt_res = kkt(g, Ae, Ai, le, li, lb, Ab)
                history[-1].kkt_residual = kkt_res
                lam_e, lam_i = le, li
            except (QPInfeasibleError, NonConvergenceError):
                pass
            status = "converged"
            break
    return OptResult(x, f, history, status, len(history) - 1, {"eq": lam_e, "ineq": lam_i})


# --- gradient check ------------------------------------------------------------


@dataclass
class GradientEntry:
    index: int
    analytic: float
    fd: float
    abs_error: float
    rel_error: float


def check_gradients(fun, x, step=1e-6, grad=None, relative_step=True, order=2):
    """Central-difference check of ``grad`` (or of ``fun``'s second return).

    ``fun(x)`` returns ``f`` or ``(f, g)``. Steps are ``step * max(1, |x_i|)``
    when ``relative_step``. ``order`` 4 uses the five-point stencil, for
    functions whose third derivatives swamp the second-order truncation
    error at usable steps. Entries come back sorted by relative error,
    worst first; the relative error is measured against the gradient norm
    for entries that are tiny compared with it.
    """
    x = np.asarray(x, dtype=float)

    def value(z):
        out = fun(z)
        return float(out[0] if isinstance(out, tuple) else out)

    if grad is None:
        out = fun(x)
        grad = np.asarray(out[1], dtype=float).ravel()
    else:
        grad = np.asarray(grad, dtype=float).ravel()
    gnorm = np.linalg.norm(grad)
    entries = []
    for i in range(len(x)):
        h = step * (max(1.0, abs(x[i])) if relative_step else 1.0)
        e = np.zeros_like(x)
        e[i] = h
        if order == 2:
            fd = (value(x + e) - value(x - e)) / (2 * h)
        elif order == 4:
            fd = (8 * (value(x + e) - value(x - e)) - (value(x + 2 * e) - value(x - 2 * e))) / (12 * h)
        else:
            raise ValueError("order must be 2 or 4")
        err = abs(grad[i] - fd)
        scale = max(abs(fd), abs(grad[i]), 1e-8 * gnorm, 1e-300)
        entries.append(GradientEntry(i, float(grad[i]), float(fd), err, err / scale))
    entries.sort(key=lambda r: -r.rel_error)
    return entries
