"""Sparse direct solves and the Newton-Raphson driver."""
from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import FactorizationError, NonConvergenceError

# instrumentation: number of factorizations and triangular solve pairs
COUNTERS = {"factorizations": 0, "solves": 0}


class Factorization:
    """Sparse LU of a square matrix, reused for plain and transposed
    right-hand sides.

    Solves apply a few steps of iterative refinement: penalty blocks make
    the matrices badly scaled and a bare LU solve loses several digits.
    """

    refine_steps = 3

    def __init__(self, K):
        K = sp.csc_matrix(K)
        if K.shape[0] != K.shape[1]:
            raise ValueError("matrix must be square")
        self.shape = K.shape
        self.K = K
        self._Kx = None
        try:
            self._lu = spla.splu(K)
        except RuntimeError as exc:
            raise FactorizationError(f"singular matrix: {exc}", pivot=_zero_pivot(K)) from exc
        # pivots are judged against their own column so that rows of very
        # different scale (masked dofs next to penalty terms) are not flagged
        cols = np.argsort(self._lu.perm_c)
        colmax = np.asarray(abs(K).max(axis=0).todense()).ravel()[cols]
        small = np.where(np.abs(self._lu.U.diagonal()) <= 1e-14 * np.maximum(colmax, 1e-300))[0]
        if len(small):
            j = int(cols[small[0]])
            raise FactorizationError(f"zero pivot at column {j}", pivot=j)
        COUNTERS["factorizations"] += 1

    def solve(self, b, trans=False):
        COUNTERS["solves"] += 1
        b = np.asarray(b, dtype=float)
        t = "T" if trans else "N"
        x = self._lu.solve(b, trans=t)
        if self.refine_steps:
            # residuals in extended precision recover the digits lost to
            # the penalty/shell stiffness contrast
            if self._Kx is None:
                self._Kx = self.K.astype(np.longdouble)
            A = self._Kx.T if trans else self._Kx
            bx = b.astype(np.longdouble)
            xx = x.astype(np.longdouble)
            for _ in range(self.refine_steps):
                r = np.asarray(bx - A @ xx, dtype=float)
                dx = self._lu.solve(r, trans=t)
                xx = xx + dx
                if np.linalg.norm(dx) <= 1e-17 * np.linalg.norm(x):
                    break
            x = np.asarray(xx, dtype=float)
        return x


def _zero_pivot(K):
    d = np.abs(K.diagonal())
    return int(np.argmin(d)) if len(d) else None


# id(K) -> (weakref to K, factorization); sparse matrices are unhashable
_CACHE: dict = {}


def factorize(K) -> Factorization:
    """Factorization of K, cached per matrix instance (K is assumed not to
    be modified in place afterwards)."""
    key = id(K)
    hit = _CACHE.get(key)
    if hit is not None and hit[0]() is K:
        return hit[1]
    f = Factorization(K)
    try:
        ref = weakref.ref(K, lambda _, key=key: _CACHE.pop(key, None))
    except TypeError:
        return f
    _CACHE[key] = (ref, f)
    return f


def sparse_solve(K, b):
    return factorize(K).solve(b)


def sparse_solve_transpose(K, b):
    return factorize(K).solve(b, trans=True)


@dataclass
class NewtonSettings:
    rtol: float = 1e-6
    atol: float = 1e-12
    max_iter: int = 30
    line_search: str = "backtracking"
    max_halvings: int = 8
    stol: float = 0.0

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0 and self.stol >= 0):
            raise ValueError("tolerances must be positive")
        if self.line_search not in ("none", "backtracking"):
            raise ValueError("line_search must be 'none' or 'backtracking'")


@dataclass
class NewtonResult:
    d: np.ndarray
    history: list
    iterations: int
    K: object = None


def newton_solve(assemble, d0, settings: NewtonSettings | None = None, residual=None) -> NewtonResult:
    """Solve R(d) = 0.

    ``assemble(d)`` returns ``(R, K)``; ``residual(d)`` (optional) returns R
    alone and is used by the line search. Convergence: ||R|| <= rtol ||R0||
    or ||R|| <= atol.
    """
    s = settings or NewtonSettings()
    d = np.array(d0, dtype=float)
    R, K = assemble(d)
    r0 = np.linalg.norm(R)
    history = [r0]
    it = 0
    while True:
        nrm = history[-1]
        if not np.isfinite(nrm):
            raise NonConvergenceError("non-finite residual", history)
        if nrm <= s.atol or (it > 0 and nrm <= s.rtol * r0):
            return NewtonResult(d, history, it, K)
        if it >= s.max_iter:
            raise NonConvergenceError(f"Newton did not converge in {s.max_iter} iterations", history)
        dd = Factorization(K).solve(-R)
        step = 1.0
        trial = d + dd
        if s.line_search == "backtracking":
            rfun = residual or (lambda x: assemble(x)[0])
            for _ in range(s.max_halvings):
                rn = np.linalg.norm(rfun(trial))
                if np.isfinite(rn) and (rn < nrm or rn <= s.rtol * r0):
                    break
                step *= 0.5
                trial = d + step * dd
        d = trial
        R, K = assemble(d)
        history.append(np.linalg.norm(R))
        it += 1
        if step == 1.0 and np.linalg.norm(dd) <= s.stol * np.linalg.norm(d):
            return NewtonResult(d, history, it, K)
