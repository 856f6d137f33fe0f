"""Dense two-phase tableau simplex for small linear programs.

Solves ``min c'x  s.t.  A_ub x <= b_ub,  A_eq x = b_eq,  0 <= x <= upper``
with Bland's anti-cycling rule. Intended for the few-hundred-variable
subproblems of the trust-region attack; no sparsity is exploited.
"""

from dataclasses import dataclass

import numpy as np

from rankshield.errors import NumericError

PIVOT_TOL = 1e-9

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration_limit"


@dataclass
class LpResult:
    x: np.ndarray
    fun: float
    status: str
    nit: int

    @property
    def success(self):
        return self.status == OPTIMAL


@dataclass
class LpProblem:
    """A linear program in inequality/equality form with ``x >= 0``."""

    c: np.ndarray
    A_ub: np.ndarray = None
    b_ub: np.ndarray = None
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None
    upper: np.ndarray = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        nv = self.c.size
        self.A_ub = np.zeros((0, nv)) if self.A_ub is None else np.atleast_2d(np.asarray(self.A_ub, float))
        self.b_ub = np.zeros(0) if self.b_ub is None else np.asarray(self.b_ub, float)
        self.A_eq = np.zeros((0, nv)) if self.A_eq is None else np.atleast_2d(np.asarray(self.A_eq, float))
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, float)
        for M in (self.c, self.A_ub, self.b_ub, self.A_eq, self.b_eq):
            if not np.all(np.isfinite(M)):
                raise NumericError("LP data must be finite")
        if self.A_ub.shape != (self.b_ub.size, nv) or self.A_eq.shape != (self.b_eq.size, nv):
            raise NumericError("LP constraint shapes are inconsistent")

    def solve(self, tol=PIVOT_TOL, max_iter=None):
        return linprog(self.c, self.A_ub, self.b_ub, self.A_eq, self.b_eq,
                       self.upper, tol=tol, max_iter=max_iter)


def _pivot(T, basis, r, j):
    T[r] /= T[r, j]
    col = T[:, j].copy()
    col[r] = 0.0
    T -= np.outer(col, T[r])
    basis[r] = j


def _run(T, basis, ncols, tol, max_iter):
    """Simplex iterations on tableau ``T`` (objective in the last row).

    Only the first ``ncols`` columns may enter. Returns (status, iterations).
    """
    m = T.shape[0] - 1
    it = 0
    while True:
        cost = T[-1, :ncols]
        cand = np.flatnonzero(cost < -tol)
        if cand.size == 0:
            return OPTIMAL, it
        if it >= max_iter:
            return ITERATION_LIMIT, it
        j = cand[0]
        colj = T[:m, j]
        pos = np.flatnonzero(colj > tol)
        if pos.size == 0:
            return UNBOUNDED, it
        ratios = T[pos, -1] / colj[pos]
        best = ratios.min()
        ties = pos[ratios <= best + tol * max(1.0, abs(best))]
        r = ties[np.argmin(basis[ties])]
        _pivot(T, basis, r, j)
        it += 1


def linprog(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, upper=None,
            tol=PIVOT_TOL, max_iter=None):
    c = np.asarray(c, dtype=float)
    nv = c.size
    A_ub = np.zeros((0, nv)) if A_ub is None else np.atleast_2d(np.asarray(A_ub, float))
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, float)
    A_eq = np.zeros((0, nv)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, float)
    if upper is not None:
        upper = np.broadcast_to(np.asarray(upper, float), (nv,))
        fin = np.flatnonzero(np.isfinite(upper))
        A_ub = np.vstack([A_ub, np.eye(nv)[fin]])
        b_ub = np.concatenate([b_ub, upper[fin]])

    mu, me = A_ub.shape[0], A_eq.shape[0]
    m = mu + me
    # columns: variables | slacks (one per ub row) | artificials | rhs
    need_art = np.concatenate([b_ub < 0, np.ones(me, dtype=bool)])
    art_rows = np.flatnonzero(need_art)
    na = art_rows.size
    ncol = nv + mu + na
    T = np.zeros((m + 1, ncol + 1))
    T[:mu, :nv] = A_ub
    T[:mu, nv:nv + mu] = np.eye(mu)
    T[:mu, -1] = b_ub
    T[mu:m, :nv] = A_eq
    T[mu:m, -1] = b_eq
    flip = T[:m, -1] < 0
    T[:m][flip] *= -1.0
    basis = np.empty(m, dtype=np.int64)
    basis[:mu] = nv + np.arange(mu)
    for a, r in enumerate(art_rows):
        T[r, nv + mu + a] = 1.0
        basis[r] = nv + mu + a

    if max_iter is None:
        max_iter = 50 * (m + ncol) + 1000
    total = 0
    if na:
        T[-1, :] = 0.0
        T[-1, nv + mu:ncol] = 1.0
        for r in art_rows:
            T[-1] -= T[r]
        status, it = _run(T, basis, ncol, tol, max_iter)
        total += it
        if status != OPTIMAL:
            return LpResult(np.full(nv, np.nan), np.nan, status, total)
        if -T[-1, -1] > tol * max(1.0, np.abs(T[:m, -1]).max(initial=0.0)) * 10:
            return LpResult(np.full(nv, np.nan), np.nan, INFEASIBLE, total)
        # drive remaining artificials out of the basis, dropping redundant rows
        keep = np.ones(m + 1, dtype=bool)
        for r in range(m):
            if basis[r] >= nv + mu:
                nz = np.flatnonzero(np.abs(T[r, :nv + mu]) > tol)
                if nz.size:
                    _pivot(T, basis, r, nz[0])
                else:
                    keep[r] = False
        T = T[keep]
        basis = basis[keep[:m]]
        T = np.delete(T, np.s_[nv + mu:ncol], axis=1)
        m = T.shape[0] - 1
    ncol = nv + mu
    T[-1, :] = 0.0
    T[-1, :nv] = c
    for r in range(m):
        if T[-1, basis[r]] != 0.0:
            T[-1] -= T[-1, basis[r]] * T[r]
    status, it = _run(T, basis, ncol, tol, max_iter - total)
    total += it
    x = np.zeros(ncol)
    x[basis] = T[:m, -1]
    x = x[:nv]
    fun = float(c @ x) if status == OPTIMAL else np.nan
    return LpResult(x, fun, status, total)
